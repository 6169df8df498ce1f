"""
Benign image sources: the procedural ShapeSet, a reader for external
32×32 binary corpora and the stratified train/test split.
"""
from pathlib import Path
import logging

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigurationError, FormatError

logger = logging.getLogger(__name__)

SHAPE_CLASSES = ('disk', 'ring', 'square', 'triangle', 'cross',
                 'hbars', 'vbars', 'checker', 'diamond', 'star')

SPLIT_NONE = 0
SPLIT_TRAIN = 1
SPLIT_TEST = 2
_split_codes = {'train': SPLIT_TRAIN, 'test': SPLIT_TEST}


class BenignStore:
    """
    Clean images with labels, identity and split tag.

    images are uint8 N×3×H×W; ``images_float`` gives the [0, 1] view used by
    models and attacks. The image id is its index in the store.
    """

    def __init__(self, images, labels, split=None, provenance='shapeset'):
        images = np.asarray(images, dtype=np.uint8)
        labels = np.asarray(labels, dtype=np.int64)
        assert images.ndim == 4 and images.shape[1] == 3
        assert labels.shape == (images.shape[0],)
        self.images = images
        self.labels = labels
        if split is None:
            split = np.zeros(images.shape[0], dtype=np.uint8)
        self.split = np.asarray(split, dtype=np.uint8)
        self.provenance = provenance

    def __repr__(self):
        txt = 'BenignStore ({})\n'.format(self.provenance)
        txt += '  {} images {}x{}\n'.format(len(self), self.images.shape[2], self.images.shape[3])
        txt += '  train: {} test: {}'.format(int(np.sum(self.split == SPLIT_TRAIN)),
                                             int(np.sum(self.split == SPLIT_TEST)))
        return txt

    def __len__(self):
        return self.images.shape[0]

    @property
    def image_size(self):
        return self.images.shape[2]

    @property
    def num_classes(self):
        return int(self.labels.max()) + 1 if len(self) else 0

    def images_float(self, ids=None):
        images = self.images if ids is None else self.images[ids]
        return images.astype(np.float32) / 255.

    def split_ids(self, name):
        return np.flatnonzero(self.split == _split_codes[name]).astype(np.uint32)

    def get_split(self, name):
        """
        Returns
        -------
        images: np.ndarray float32 in [0, 1]
        labels: np.ndarray
        ids: np.ndarray uint32
        """
        ids = self.split_ids(name)
        return self.images_float(ids), self.labels[ids], ids

    def class_counts(self, name=None):
        labels = self.labels if name is None else self.labels[self.split_ids(name)]
        return np.bincount(labels, minlength=self.num_classes)

    def save(self, path):
        np.savez_compressed(path, images=self.images, labels=self.labels, split=self.split,
                            provenance=np.array(self.provenance))
        logger.info('saved benign store %s (%d images)', path, len(self))

    @classmethod
    def load(cls, path):
        with np.load(path) as d:
            return cls(d['images'], d['labels'], d['split'], provenance=str(d['provenance']))


def _shape_mask(name, u, v):
    rho = np.sqrt(u * u + v * v)
    box = np.maximum(np.abs(u), np.abs(v))
    if name == 'disk':
        return rho < 1.
    elif name == 'ring':
        return (rho < 1.) & (rho > 0.6)
    elif name == 'square':
        return box < 0.8
    elif name == 'triangle':
        return (v >= -0.6) & (np.abs(u) <= 0.5 * (0.9 - v))
    elif name == 'cross':
        return ((np.abs(u) < 0.25) & (np.abs(v) < 0.9)) | ((np.abs(v) < 0.25) & (np.abs(u) < 0.9))
    elif name == 'hbars':
        return (box < 0.9) & (np.sin(v * np.pi * 2.5) > 0)
    elif name == 'vbars':
        return (box < 0.9) & (np.sin(u * np.pi * 2.5) > 0)
    elif name == 'checker':
        return (box < 0.9) & (np.sin(u * np.pi * 2) * np.sin(v * np.pi * 2) > 0)
    elif name == 'diamond':
        return np.abs(u) + np.abs(v) < 0.9
    elif name == 'star':
        return rho < 0.55 + 0.35 * np.cos(5 * np.arctan2(v, u))
    raise ConfigurationError('unknown shape class {}'.format(name))


def render_shape(name, rng, size=32):
    """
    Render one shape with random position, scale, rotation, colors and texture.

    Returns a float image 3×size×size in [0, 1].
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    yy = (yy + 0.5) / size * 2 - 1
    xx = (xx + 0.5) / size * 2 - 1
    cx, cy = rng.uniform(-0.25, 0.25, size=2)
    scale = rng.uniform(0.4, 0.7)
    theta = rng.uniform(-np.pi / 6, np.pi / 6)
    dx, dy = xx - cx, yy - cy
    u = (np.cos(theta) * dx + np.sin(theta) * dy) / scale
    v = (-np.sin(theta) * dx + np.cos(theta) * dy) / scale
    mask = gaussian_filter(_shape_mask(name, u, v).astype(np.float64), sigma=0.5)

    background = rng.uniform(0.0, 0.4, size=3)
    foreground = rng.uniform(0.6, 1.0, size=3)
    if rng.uniform() < 0.5:
        background, foreground = foreground, background
    image = background[:, None, None] + (foreground - background)[:, None, None] * mask[None]
    texture = gaussian_filter(rng.normal(0., 0.06, size=(3, size, size)), sigma=(0, 1, 1))
    return np.clip(image + texture, 0., 1.)


def quantize(image):
    """Round to the nearest 1/255 level as uint8."""
    return np.round(np.clip(image, 0., 1.) * 255.).astype(np.uint8)


def shapeset_generate(n_per_class, classes=10, size=32, seed=0):
    """
    Procedural, class-balanced benign images.

    Parameters
    ----------
    n_per_class: int
        Images per class (>= 1)
    classes: int
        Number of shape classes, at most len(SHAPE_CLASSES)
    size: int
        Image side
    seed: int
        Master seed; image i of class c uses the stream [seed, c, i]

    Returns
    -------
    store: BenignStore
        Unsplit store, images ordered class by class
    """
    if n_per_class < 1:
        raise ConfigurationError('n_per_class must be >= 1')
    if not 1 <= classes <= len(SHAPE_CLASSES):
        raise ConfigurationError('classes must be in [1, {}]'.format(len(SHAPE_CLASSES)))
    images = np.zeros((classes * n_per_class, 3, size, size), dtype=np.uint8)
    labels = np.repeat(np.arange(classes), n_per_class)
    for c in range(classes):
        for i in range(n_per_class):
            rng = np.random.default_rng([seed, c, i])
            images[c * n_per_class + i] = quantize(render_shape(SHAPE_CLASSES[c], rng, size=size))
    logger.info('generated ShapeSet: %d classes x %d images, seed %d', classes, n_per_class, seed)
    return BenignStore(images, labels, provenance='shapeset')


def read_external_corpus(path, size=32):
    """
    Read a binary corpus of records: 1 label byte then 3·size·size pixel
    bytes in channel-major order.
    """
    path = Path(path)
    data = path.read_bytes()
    record = 1 + 3 * size * size
    if len(data) % record != 0:
        raise FormatError('{}: truncated record'.format(path), offset=(len(data) // record) * record)
    n = len(data) // record
    raw = np.frombuffer(data, dtype=np.uint8).reshape(n, record)
    labels = raw[:, 0].astype(np.int64)
    images = raw[:, 1:].reshape(n, 3, size, size).copy()
    logger.info('read external corpus %s: %d images', path, n)
    return BenignStore(images, labels, provenance='external')


def split_benign(store, train_fraction=0.8, seed=0):
    """
    Stratified, seeded train/test split. Every class keeps at least one image
    on each side.

    Returns
    -------
    store: BenignStore
        New store sharing images and labels, with the split tag set
    """
    if not 0. < train_fraction < 1.:
        raise ConfigurationError('train_fraction must be in (0, 1)')
    rng = np.random.default_rng(seed)
    split = np.full(len(store), SPLIT_TEST, dtype=np.uint8)
    for c in np.unique(store.labels):
        ids = np.flatnonzero(store.labels == c)
        if ids.size < 2:
            raise ConfigurationError('class {} has {} image(s), need at least 2 to split'.format(c, ids.size))
        n_train = int(round(train_fraction * ids.size))
        n_train = min(max(n_train, 1), ids.size - 1)
        split[rng.permutation(ids)[:n_train]] = SPLIT_TRAIN
    return BenignStore(store.images, store.labels, split, provenance=store.provenance)
