"""
Scoring helpers: confusion matrix, per-class performance and image quality
metrics (PSNR, SSIM) on the 255 scale.
"""
import numpy as np
import pandas as pd
from scipy.ndimage import uniform_filter

from .attacktools import ATTACK_NAMES, FAMILY_NAMES, family_of
from .errors import DimensionError

PSNR_CAP = 100.
SSIM_WINDOW = 8
SSIM_K1 = 0.01
SSIM_K2 = 0.03
PIXEL_MAX = 255.


def class_names(arity):
    if arity == len(ATTACK_NAMES):
        return list(ATTACK_NAMES)
    if arity == len(FAMILY_NAMES):
        return list(FAMILY_NAMES)
    return [str(i) for i in range(arity)]


def do_confusion_matrix(true_labels, pred_labels, arity):
    """
    Computes the confusion matrix between true and predicted labels.

    Parameters
    ----------
    true_labels: np.ndarray
    pred_labels: np.ndarray
    arity: int
        Number of classes; labels are 0..arity-1

    Returns
    ------
    confusion_matrix: pd.DataFrame
        index are true classes, columns are predicted classes
    """
    true_labels = np.asarray(true_labels, dtype=np.int64)
    pred_labels = np.asarray(pred_labels, dtype=np.int64)
    if true_labels.shape != pred_labels.shape:
        raise DimensionError('{} true labels for {} predictions'.format(true_labels.size, pred_labels.size))
    counts = np.zeros((arity, arity), dtype=np.int64)
    np.add.at(counts, (true_labels, pred_labels), 1)
    names = class_names(arity)
    conf_matrix = pd.DataFrame(counts, index=names, columns=names)
    conf_matrix.index.name = 'true'
    conf_matrix.columns.name = 'predicted'
    return conf_matrix


def compute_class_performance(conf_matrix):
    """
    Per-class support, correct count, accuracy (recall) and precision.
    Classes without support get accuracy 0.
    """
    counts = conf_matrix.values
    support = counts.sum(axis=1)
    predicted = counts.sum(axis=0)
    correct = np.diag(counts)
    perf = pd.DataFrame(index=conf_matrix.index)
    perf.index.name = 'class'
    perf['label'] = np.arange(counts.shape[0])
    perf['support'] = support
    perf['correct'] = correct
    perf['accuracy'] = np.where(support > 0, correct / np.maximum(support, 1), 0.)
    perf['precision'] = np.where(predicted > 0, correct / np.maximum(predicted, 1), 0.)
    return perf


def overall_accuracy(conf_matrix):
    counts = conf_matrix.values
    total = counts.sum()
    return float(np.trace(counts) / total) if total else 0.


def collapse_to_families(conf_matrix):
    """
    Folds a 13-way attack confusion into the 3-way family confusion: a
    prediction counts as correct when it names any attack of the true family.
    """
    counts = conf_matrix.values
    assert counts.shape == (len(ATTACK_NAMES), len(ATTACK_NAMES))
    families = np.array([family_of(a) for a in range(len(ATTACK_NAMES))])
    onehot = np.eye(len(FAMILY_NAMES), dtype=np.int64)[families]
    folded = onehot.T @ counts @ onehot
    out = pd.DataFrame(folded, index=list(FAMILY_NAMES), columns=list(FAMILY_NAMES))
    out.index.name = 'true'
    out.columns.name = 'predicted'
    return out


def _to_255(image):
    return np.asarray(image, dtype=np.float64) * PIXEL_MAX


def psnr(image, reference):
    """PSNR in dB on the 255 scale, capped at PSNR_CAP for identical inputs."""
    a, b = _to_255(image), _to_255(reference)
    if a.shape != b.shape:
        raise DimensionError('{} vs {}'.format(a.shape, b.shape))
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10 * np.log10(PIXEL_MAX ** 2 / mse)))


def ssim(image, reference):
    """
    Mean SSIM over 8×8 uniform windows (per channel, then averaged),
    K1=0.01, K2=0.03, L=255.

    Parameters
    ----------
    image, reference: np.ndarray
        3×H×W (or H×W) in [0, 1]
    """
    a, b = _to_255(image), _to_255(reference)
    if a.shape != b.shape:
        raise DimensionError('{} vs {}'.format(a.shape, b.shape))
    if a.ndim == 2:
        a, b = a[None], b[None]
    c1 = (SSIM_K1 * PIXEL_MAX) ** 2
    c2 = (SSIM_K2 * PIXEL_MAX) ** 2
    size = (1, SSIM_WINDOW, SSIM_WINDOW)
    mu_a = uniform_filter(a, size=size, mode='reflect')
    mu_b = uniform_filter(b, size=size, mode='reflect')
    var_a = uniform_filter(a * a, size=size, mode='reflect') - mu_a ** 2
    var_b = uniform_filter(b * b, size=size, mode='reflect') - mu_b ** 2
    cov = uniform_filter(a * b, size=size, mode='reflect') - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    value = float(np.mean(num / den))
    return float(np.clip(value, -1., 1.))


def is_increasing_trend(values, tolerance=0.02, max_inversions=1):
    """
    True when ``values`` (NaN skipped) never decrease, except for at most
    ``max_inversions`` drops each no larger than ``tolerance``.
    """
    values = np.asarray(values, dtype=np.float64)
    values = values[~np.isnan(values)]
    drops = -np.diff(values)
    drops = drops[drops > 0]
    return bool(drops.size <= max_inversions and np.all(drops <= tolerance))
