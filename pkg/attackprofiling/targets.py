"""
Desk-scale victim classifiers: a residual, a dense and an inception-style
network, all with GELU activations and average pooling.
"""
from dataclasses import dataclass
import logging

import numpy as np
import pandas as pd
from tqdm import tqdm

from .configtools import ConfigMixin
from .errors import ConfigurationError, ContractError, NumericError, TrainingError, QueryBudgetExceeded
from .layers import (Module, ModuleList, Linear, Conv2d, BatchNorm2d, DenseLayer, Adam,
                     save_checkpoint, load_checkpoint)
from .numerics import (Tensor, Tape, backward, gelu, avg_pool2d, concat, mean,
                       channel_affine, cross_entropy)

logger = logging.getLogger(__name__)

MODEL_FAMILIES = ('res', 'dense', 'incep')
MODEL_NAMES = {'res': 'MiniRes', 'dense': 'MiniDense', 'incep': 'MiniIncep'}


@dataclass
class ArchitectureSpec(ConfigMixin):
    family: str = 'res'
    depth: int = 3
    width: int = 16
    num_classes: int = 10

    def validate(self):
        if self.family not in MODEL_FAMILIES:
            raise ConfigurationError('family must be one of {}'.format(MODEL_FAMILIES))
        if self.depth < 1 or self.width < 4 or self.num_classes < 2:
            raise ConfigurationError('depth >= 1, width >= 4 and num_classes >= 2 required')
        if self.family == 'incep' and self.width % 4 != 0:
            raise ConfigurationError('MiniIncep width must be divisible by 4')
        return self


@dataclass
class TrainConfig(ConfigMixin):
    epochs: int = 12
    batch_size: int = 32
    lr: float = 2e-3
    seed: int = 0


class _ResBlock(Module):
    def __init__(self, channels, rng):
        Module.__init__(self)
        self.conv1 = Conv2d(channels, channels, 3, rng)
        self.bn1 = BatchNorm2d(channels)
        self.conv2 = Conv2d(channels, channels, 3, rng, scale=0.5)
        self.bn2 = BatchNorm2d(channels)

    def forward(self, x):
        h = gelu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        return gelu(x + h)


class MiniRes(Module):
    """Skip-add topology."""

    def __init__(self, spec, rng):
        Module.__init__(self)
        self.stem = Conv2d(3, spec.width, 3, rng)
        self.stem_bn = BatchNorm2d(spec.width)
        self.blocks = ModuleList(_ResBlock(spec.width, rng) for _ in range(spec.depth))
        self.head = Linear(spec.width, spec.num_classes, rng, scale=0.5)

    def forward(self, x):
        x = gelu(self.stem_bn(self.stem(x)))
        for i, block in enumerate(self.blocks):
            x = block(x)
            if i < len(self.blocks) - 1:
                x = avg_pool2d(x, 2)
        return self.head(mean(x, axis=(2, 3)))


class MiniDense(Module):
    """Dense concatenative topology: two-layer dense blocks, 1×1 transitions."""

    def __init__(self, spec, rng, layers_per_block=2):
        Module.__init__(self)
        growth = spec.width // 2
        self.stem = Conv2d(3, spec.width, 3, rng)
        self.blocks = ModuleList()
        self.transitions = ModuleList()
        channels = spec.width
        for _ in range(spec.depth):
            layers = ModuleList()
            for _ in range(layers_per_block):
                layers.append(DenseLayer(channels, growth, rng))
                channels += growth
            self.blocks.append(layers)
            self.transitions.append(Conv2d(channels, spec.width, 1, rng))
            channels = spec.width
        self.final_bn = BatchNorm2d(spec.width)
        self.head = Linear(spec.width, spec.num_classes, rng, scale=0.5)

    def forward(self, x):
        x = self.stem(x)
        for i, (layers, transition) in enumerate(zip(self.blocks, self.transitions)):
            for layer in layers:
                x = layer(x)
            x = transition(x)
            if i < len(self.blocks) - 1:
                x = avg_pool2d(x, 2)
        x = gelu(self.final_bn(x))
        return self.head(mean(x, axis=(2, 3)))


class _InceptionModule(Module):
    def __init__(self, in_channels, width, rng):
        Module.__init__(self)
        branch = width // 4
        self.b1 = Conv2d(in_channels, branch, 1, rng)
        self.b3 = Conv2d(in_channels, branch, 3, rng)
        self.b5 = Conv2d(in_channels, branch, 5, rng)
        self.bpool = Conv2d(in_channels, branch, 1, rng)
        self.bn = BatchNorm2d(4 * branch)

    def forward(self, x):
        pooled = avg_pool2d(x, 3, stride=1, padding=1)
        h = concat([self.b1(x), self.b3(x), self.b5(x), self.bpool(pooled)], axis=1)
        return gelu(self.bn(h))


class MiniIncep(Module):
    """Parallel multi-scale branch topology."""

    def __init__(self, spec, rng):
        Module.__init__(self)
        self.stem = Conv2d(3, spec.width, 3, rng)
        self.stem_bn = BatchNorm2d(spec.width)
        self.modules_ = ModuleList(_InceptionModule(spec.width, spec.width, rng) for _ in range(spec.depth))
        self.head = Linear(spec.width, spec.num_classes, rng, scale=0.5)

    def forward(self, x):
        x = gelu(self.stem_bn(self.stem(x)))
        for i, module in enumerate(self.modules_):
            x = module(x)
            if i < len(self.modules_) - 1:
                x = avg_pool2d(x, 2)
        return self.head(mean(x, axis=(2, 3)))


_networks = {'res': MiniRes, 'dense': MiniDense, 'incep': MiniIncep}


class ClassifierModel(Module):
    """
    A victim classifier C(.) taking raw [0, 1] pixels.

    The per-channel normalisation is applied inside ``logits`` so attacks
    work in pixel space.
    """

    def __init__(self, spec, net, model_id, norm_mean=None, norm_std=None):
        Module.__init__(self)
        self.spec = spec
        self.net = net
        self.model_id = model_id
        self.norm_mean = np.zeros(3, dtype=np.float32) if norm_mean is None else np.asarray(norm_mean, np.float32)
        self.norm_std = np.ones(3, dtype=np.float32) if norm_std is None else np.asarray(norm_std, np.float32)

    def __repr__(self):
        return '{} (model_id {}, {} parameters)'.format(MODEL_NAMES[self.spec.family], self.model_id,
                                                        self.num_parameters())

    @property
    def num_classes(self):
        return self.spec.num_classes

    def logits(self, x):
        x = channel_affine(x, 1. / self.norm_std, -self.norm_mean / self.norm_std)
        return self.net(x)

    forward = logits


def build_target(spec, seed, model_id=None):
    """
    Build a classifier with parameters drawn from ``seed`` (He fan-in init).
    The model is returned in inference mode.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    net = _networks[spec.family](spec, rng)
    if model_id is None:
        model_id = MODEL_FAMILIES.index(spec.family)
    model = ClassifierModel(spec, net, model_id)
    model.eval()
    return model


def _as_batch(images):
    images = images.data if isinstance(images, Tensor) else np.asarray(images)
    if images.dtype == np.uint8:
        images = images.astype(np.float32) / 255.
    return images


def check_pixel_range(images):
    if images.size and (images.min() < 0. or images.max() > 1.):
        raise ContractError('pixels must lie in [0, 1], got [{:.4f}, {:.4f}]'.format(images.min(), images.max()))


def predict(model, image):
    """
    Parameters
    ----------
    model: ClassifierModel
    image: array or Tensor
        3×H×W in [0, 1]

    Returns
    -------
    logits: np.ndarray
        Raw logits (K,)
    label: int
        argmax label
    """
    image = _as_batch(image)
    check_pixel_range(image)
    logits = model.logits(Tensor(image[None])).data[0]
    return logits, int(np.argmax(logits))


def predict_logits(model, images, batch_size=256):
    images = _as_batch(images)
    check_pixel_range(images)
    out = [model.logits(Tensor(images[i:i + batch_size])).data for i in range(0, images.shape[0], batch_size)]
    if not out:
        return np.zeros((0, model.num_classes), dtype=np.float32)
    return np.concatenate(out, axis=0)


def predict_batch(model, images, batch_size=256):
    """Labels for an N×3×H×W batch."""
    return np.argmax(predict_logits(model, images, batch_size=batch_size), axis=1)


def accuracy(model, images, labels):
    if len(labels) == 0:
        return np.nan
    return float(np.mean(predict_batch(model, images) == np.asarray(labels)))


def train_target(model, store, cfg=None, verbose=False):
    """
    Train a classifier on the train split of a BenignStore with
    cross-entropy and Adam.

    Parameters
    ----------
    model: ClassifierModel
    store: BenignStore
        Split store; the train split is used for fitting and the
        normalisation constants, the test split for evaluation
    cfg: TrainConfig
    verbose: bool

    Returns
    -------
    model: ClassifierModel
        The same object, trained and in inference mode
    history: pd.DataFrame
        One row per epoch (epoch 0 is the untrained baseline) with
        columns epoch, loss, train_accuracy, test_accuracy
    """
    cfg = TrainConfig() if cfg is None else cfg
    train_x, train_y, _ = store.get_split('train')
    test_x, test_y, _ = store.get_split('test')
    if train_x.shape[0] == 0:
        raise ConfigurationError('empty training set')
    if train_y.max() >= model.num_classes:
        raise ContractError('labels exceed the classifier arity {}'.format(model.num_classes))

    model.norm_mean = train_x.mean(axis=(0, 2, 3)).astype(np.float32)
    model.norm_std = np.maximum(train_x.std(axis=(0, 2, 3)), 1e-3).astype(np.float32)

    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    opt = Adam(params, lr=cfg.lr)

    model.eval()
    rows = [dict(epoch=0, loss=np.nan, train_accuracy=accuracy(model, train_x, train_y),
                 test_accuracy=accuracy(model, test_x, test_y))]
    iteration = 0
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = rng.permutation(train_x.shape[0])
        batches = range(0, order.size, cfg.batch_size)
        if verbose:
            batches = tqdm(batches, desc='epoch {}'.format(epoch), leave=False)
        losses = []
        for start in batches:
            idx = order[start:start + cfg.batch_size]
            try:
                with Tape() as tape:
                    loss = cross_entropy(model.logits(Tensor(train_x[idx])), train_y[idx])
                grads = backward(loss, tape, wrt=params)
            except NumericError:
                raise TrainingError('non-finite loss while training {}'.format(MODEL_NAMES[model.spec.family]),
                                    iteration=iteration)
            opt.step(grads)
            losses.append(loss.item())
            iteration += 1
        model.eval()
        row = dict(epoch=epoch, loss=float(np.mean(losses)), train_accuracy=accuracy(model, train_x, train_y),
                   test_accuracy=accuracy(model, test_x, test_y))
        rows.append(row)
        logger.info('%s epoch %d loss %.4f train %.3f test %.3f', MODEL_NAMES[model.spec.family], epoch,
                    row['loss'], row['train_accuracy'], row['test_accuracy'])
    model.eval()
    history = pd.DataFrame(rows, columns=['epoch', 'loss', 'train_accuracy', 'test_accuracy'])
    return model, history


class DecisionOracle:
    """
    Prediction-only handle on a classifier: returns labels, counts queries and
    refuses to answer beyond ``budget``.
    """

    def __init__(self, model, budget=None):
        self._model = model
        self.budget = budget
        self.queries = 0

    @property
    def num_classes(self):
        return self._model.num_classes

    @property
    def remaining(self):
        return None if self.budget is None else self.budget - self.queries

    def _spend(self, n):
        if self.budget is not None and self.queries + n > self.budget:
            raise QueryBudgetExceeded('query budget of {} exhausted'.format(self.budget))
        self.queries += n

    def __call__(self, image):
        self._spend(1)
        return predict(self._model, image)[1]

    def predict_batch(self, images):
        images = _as_batch(images)
        self._spend(images.shape[0])
        return predict_batch(self._model, images)


def save_target(model, path, config_hash=None):
    config = dict(architecture=model.spec.to_dict(), model_id=model.model_id,
                  norm_mean=model.norm_mean.tolist(), norm_std=model.norm_std.tolist(),
                  config_hash=config_hash)
    save_checkpoint(path, 'PRM1', config, model.state_dict())


def load_target(path):
    config, tensors = load_checkpoint(path, 'PRM1')
    spec = ArchitectureSpec.from_dict(config['architecture'])
    model = build_target(spec, seed=0, model_id=config['model_id'])
    model.load_state_dict(tensors)
    model.norm_mean = np.asarray(config['norm_mean'], dtype=np.float32)
    model.norm_std = np.asarray(config['norm_std'], dtype=np.float32)
    model.config_hash = config.get('config_hash')
    return model
