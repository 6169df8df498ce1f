"""
Shared attack vocabulary: kinds, families, norm assignment, eps sampling,
projection onto norm balls, configuration and the result record.
"""
from dataclasses import dataclass, field
from enum import IntEnum
import logging

import numpy as np

from .configtools import ConfigMixin
from .errors import ConfigurationError, ContractError
from .numerics import Tensor, Tape, backward, cross_entropy, getitem

logger = logging.getLogger(__name__)


class AttackKind(IntEnum):
    PGD = 0
    BIM = 1
    FGSM = 2
    DEEPFOOL = 3
    NEWTONFOOL = 4
    CW = 5
    ADDITIVE_GAUSSIAN = 6
    GAUSSIAN_BLUR = 7
    SALT_PEPPER = 8
    CONTRAST_REDUCTION = 9
    BOUNDARY = 10
    UAN = 11
    UAP = 12


ATTACK_NAMES = ('PGD', 'BIM', 'FGSM', 'DeepFool', 'NewtonFool', 'CW', 'AdditiveGaussian',
                'GaussianBlur', 'SaltPepper', 'ContrastReduction', 'Boundary', 'UAN', 'UAP')
FAMILY_NAMES = ('gradient', 'decision', 'universal')

NUM_ATTACKS = len(ATTACK_NAMES)
NUM_FAMILIES = len(FAMILY_NAMES)

NORM_INF = 'inf'
NORM_L2 = 'l2'
NORM_CODES = {NORM_INF: 0, NORM_L2: 1}

_family = (0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 2, 2)
_norm = (NORM_INF, NORM_INF, NORM_INF, NORM_INF, NORM_L2, NORM_L2, NORM_L2,
         NORM_INF, NORM_INF, NORM_INF, NORM_L2, NORM_INF, NORM_INF)

# integer k ranges of the sampled bound, inclusive
EPS_K_RANGE = {NORM_INF: (1, 16), NORM_L2: (1, 10)}


def family_of(label):
    """
    Attack label (0..12) -> family (0 gradient, 1 decision, 2 universal).
    """
    label = int(label)
    if not 0 <= label < NUM_ATTACKS:
        raise ContractError('attack label {} out of range'.format(label))
    return _family[label]


def family_array(labels):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= NUM_ATTACKS):
        raise ContractError('attack label out of range')
    return np.asarray(_family, dtype=np.int64)[labels]


def norm_of(kind):
    return _norm[int(kind)]


def eps_from_k(k, norm, num_pixels):
    """
    l∞: k/255. l2: (k/255)·sqrt(m) so the per-pixel RMS equals k/255.
    """
    if norm == NORM_INF:
        return k / 255.
    return k / 255. * np.sqrt(num_pixels)


def k_from_eps(eps, norm, num_pixels):
    if norm == NORM_INF:
        return int(round(eps * 255.))
    return int(round(eps * 255. / np.sqrt(num_pixels)))


def sample_eps(kind, rng, image_shape=(3, 32, 32)):
    """
    Draw the norm bound for one sample.

    Returns
    -------
    eps: float
    k: int
        The integer level drawn from the inclusive range of the kind's norm
    """
    norm = norm_of(kind)
    low, high = EPS_K_RANGE[norm]
    k = int(rng.integers(low, high + 1))
    return float(eps_from_k(k, norm, int(np.prod(image_shape)))), k


def lp_norm(v, norm):
    v = v.data if isinstance(v, Tensor) else np.asarray(v)
    if v.size == 0:
        return 0.
    if norm == NORM_INF:
        return float(np.max(np.abs(v)))
    return float(np.sqrt(np.sum(np.square(v, dtype=np.float64))))


def project_norm(v, norm, eta):
    """
    Projection onto the l∞ ball (elementwise clamp) or the l2 ball (radial
    rescale) of radius eta. Points inside the ball are returned unchanged.
    """
    if eta < 0:
        raise ConfigurationError('eta must be non-negative')
    is_tensor = isinstance(v, Tensor)
    a = v.data if is_tensor else np.asarray(v)
    if norm == NORM_INF:
        out = np.clip(a, -eta, eta).astype(a.dtype)
    elif norm == NORM_L2:
        n = lp_norm(a, NORM_L2)
        out = a if n <= eta else (a * (eta / n)).astype(a.dtype)
    else:
        raise ConfigurationError("norm must be '{}' or '{}'".format(NORM_INF, NORM_L2))
    return Tensor(out) if is_tensor else out


@dataclass
class AttackConfig(ConfigMixin):
    """
    Numeric hyper-parameters of every attack. ``eps`` and ``norm`` are set
    per sample by the caller; the rest are attack-specific knobs.
    """
    eps: float = 8. / 255.
    norm: str = NORM_INF
    steps: int = 10
    step_size: float = None
    overshoot: float = 0.02
    deepfool_steps: int = 50
    newton_eta: float = 0.01
    newton_steps: int = 50
    cw_confidence: float = 0.
    cw_search_steps: int = 5
    cw_steps: int = 100
    cw_lr: float = 0.01
    cw_initial_const: float = 0.1
    max_queries: int = 2000
    boundary_init_tries: int = 100
    boundary_spherical_step: float = 0.01
    boundary_source_step: float = 0.01
    severity_steps: int = 12
    gaussian_sigma_max: float = 0.1
    blur_sigma_max: float = 3.
    salt_pepper_max: float = 1.
    uap_delta: float = 0.8
    uap_epochs: int = 10
    uap_images: int = 100
    uan_epochs: int = 20
    uan_batch: int = 32
    uan_lr: float = 0.005
    uan_latent: int = 16
    seed: int = 0

    def validate(self):
        if self.eps < 0:
            raise ConfigurationError('eps must be >= 0')
        if self.norm not in NORM_CODES:
            raise ConfigurationError('unknown norm {}'.format(self.norm))
        if self.steps < 1 or self.max_queries < 1:
            raise ConfigurationError('steps and max_queries must be >= 1')
        if self.step_size is not None and self.step_size <= 0:
            raise ConfigurationError('step_size must be > 0')
        if self.overshoot < 0 or self.cw_confidence < 0:
            raise ConfigurationError('overshoot and cw_confidence must be >= 0')
        if self.cw_search_steps < 1 or self.cw_steps < 1:
            raise ConfigurationError('CW search and inner steps must be >= 1')
        return self

    @property
    def effective_step_size(self):
        if self.step_size is not None:
            return self.step_size
        return 2.5 * self.eps / self.steps


@dataclass
class AttackResult:
    """
    adv_image == clip(clean + perturbation, 0, 1) and
    achieved_norm == ||perturbation|| <= eps.
    """
    kind: int
    adv_image: np.ndarray
    perturbation: np.ndarray
    success: bool
    achieved_norm: float
    eps: float
    norm: str
    clean_label: int
    adv_label: int
    queries_used: int = 0
    iterations: int = 0
    info: dict = field(default_factory=dict)

    def __repr__(self):
        return 'AttackResult({} success={} norm={:.5f}/{:.5f} labels {}->{})'.format(
            ATTACK_NAMES[self.kind], self.success, self.achieved_norm, self.eps, self.clean_label, self.adv_label)


def make_result(kind, clean, rho, cfg, clean_label, decide=None, adv_label=None, queries_used=0,
                iterations=0, info=None):
    """
    Project ``rho`` on the cfg ball, build the clipped adversarial image and
    record success from ``adv_label`` (if known) or ``decide(adv)``.
    """
    clean = np.asarray(clean, dtype=np.float32)
    rho = project_norm(np.asarray(rho, dtype=np.float32), cfg.norm, cfg.eps)
    adv = np.clip(clean + rho, 0., 1.)
    achieved = lp_norm(rho, cfg.norm)
    assert achieved <= cfg.eps + 1e-5, 'perturbation escaped the norm ball'
    if adv_label is None:
        adv_label = decide(adv)
    return AttackResult(kind=int(kind), adv_image=adv, perturbation=rho, success=bool(adv_label != clean_label),
                        achieved_norm=achieved, eps=float(cfg.eps), norm=cfg.norm, clean_label=int(clean_label),
                        adv_label=int(adv_label), queries_used=queries_used, iterations=iterations,
                        info={} if info is None else info)


def loss_gradient(model, image, label):
    """
    Gradient of the cross-entropy of ``label`` w.r.t. one 3×H×W image.

    Returns
    -------
    grad: np.ndarray
    logits: np.ndarray
    """
    x = Tensor(np.asarray(image)[None], requires_grad=True)
    with Tape() as tape:
        logits = model.logits(x)
        loss = cross_entropy(logits, [label])
    grad = backward(loss, tape, wrt=[x])[x][0]
    return grad, logits.data[0]


def logits_and_jacobian(model, image):
    """
    Logits (K,) and their Jacobian (K×3×H×W) w.r.t. the image, every row
    taken from a single recorded forward pass.
    """
    x = Tensor(np.asarray(image)[None], requires_grad=True)
    with Tape() as tape:
        logits = model.logits(x)
        picks = [getitem(logits, (0, k)) for k in range(logits.shape[1])]
    jacobian = np.stack([backward(p, tape, wrt=[x])[x][0] for p in picks])
    return logits.data[0], jacobian
