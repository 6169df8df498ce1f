"""
Attack profiling: fusion of the extracted signature with the adversarial
input, a dense-connectivity attack classifier, and the pipeline that ties
them to a SignatureExtractor.
"""
from dataclasses import dataclass
import logging

import numpy as np

from .attacktools import family_of, NUM_ATTACKS, NUM_FAMILIES
from .configtools import ConfigMixin
from .errors import ConfigurationError, DimensionError
from .glof import SignatureExtractor, ExtractorConfig
from .layers import Module, ModuleList, Linear, Conv2d, BatchNorm2d, DenseLayer, save_checkpoint, load_checkpoint
from .numerics import Tensor, gelu, concat, avg_pool2d, mean, softmax

logger = logging.getLogger(__name__)

TASKS = {'attack': NUM_ATTACKS, 'family': NUM_FAMILIES}


@dataclass
class FusionConfig(ConfigMixin):
    depth: int = 2
    channels: int = 16
    fusion: bool = True


class ConvBranch(Module):
    """``depth`` 3×3 convolutions, GELU between consecutive ones."""

    def __init__(self, depth, channels, rng):
        Module.__init__(self)
        self.convs = ModuleList()
        in_channels = 3
        for _ in range(depth):
            self.convs.append(Conv2d(in_channels, channels, 3, rng))
            in_channels = channels

    def forward(self, x):
        for i, conv in enumerate(self.convs):
            if i:
                x = gelu(x)
            x = conv(x)
        return x


class FusionModule(Module):
    def __init__(self, cfg, rng):
        Module.__init__(self)
        self.cfg = cfg
        self.signature_branch = ConvBranch(cfg.depth, cfg.channels, rng)
        self.input_branch = ConvBranch(cfg.depth, cfg.channels, rng)

    @property
    def out_channels(self):
        return 2 * self.cfg.channels if self.cfg.fusion else self.cfg.channels

    def forward(self, signature, adv_image):
        return fuse(signature, adv_image, self)


def fuse(signature, adv_image, module):
    """
    Branch convolutions on signature and input, concatenated along channels
    (signature first). With fusion disabled only the signature branch is
    returned.
    """
    if signature.shape != adv_image.shape:
        raise DimensionError('signature {} and image {} differ in shape'.format(signature.shape, adv_image.shape))
    s = module.signature_branch(signature)
    if not module.cfg.fusion:
        return s
    return concat([s, module.input_branch(adv_image)], axis=1)


class AttackClassifier(Module):
    """
    Stem conv (24) -> 3 dense blocks of 3 BN-GELU-conv3 layers (growth 12)
    with 1×1 ×0.5 transitions and 2×2 average pooling between blocks ->
    BN-GELU-global average pool -> dense head.
    """

    def __init__(self, in_channels, arity, rng, stem=24, growth=12, blocks=3, layers_per_block=3):
        Module.__init__(self)
        self.arity = arity
        self.stem = Conv2d(in_channels, stem, 3, rng)
        self.blocks = ModuleList()
        self.transitions = ModuleList()
        channels = stem
        for b in range(blocks):
            block = ModuleList()
            for _ in range(layers_per_block):
                block.append(DenseLayer(channels, growth, rng))
                channels += growth
            self.blocks.append(block)
            if b < blocks - 1:
                out = channels // 2
                self.transitions.append(Conv2d(channels, out, 1, rng))
                channels = out
        self.final_bn = BatchNorm2d(channels)
        self.num_features = channels
        self.head = Linear(channels, arity, rng, scale=0.5)

    def features(self, x):
        x = self.stem(x)
        for b, block in enumerate(self.blocks):
            for layer in block:
                x = layer(x)
            if b < len(self.transitions):
                x = avg_pool2d(self.transitions[b](x), 2)
        return mean(gelu(self.final_bn(x)), axis=(2, 3))

    def forward(self, x):
        return self.head(self.features(x))


def classify(classifier, fused):
    """
    Returns
    -------
    probabilities: np.ndarray
        N×arity, rows sum to 1
    labels: np.ndarray
    """
    fused = fused if isinstance(fused, Tensor) else Tensor(np.asarray(fused, dtype=np.float32))
    probs = softmax(classifier(fused), axis=-1).data
    return probs, np.argmax(probs, axis=1)


class ProfilingPipeline(Module):
    """
    extractor (or None) -> fusion -> attack classifier.

    Parameters
    ----------
    extractor: SignatureExtractor or None
        None is the no-extractor ablation: the adversarial image feeds the
        signature branch and fusion is off
    fusion_cfg: FusionConfig
    task: 'attack' (13-way) or 'family' (3-way)
    freeze_extractor: bool
        Stage-2 training leaves extractor parameters untouched
    seed: int
    """

    def __init__(self, extractor=None, fusion_cfg=None, task='attack', freeze_extractor=False, seed=0):
        Module.__init__(self)
        if task not in TASKS:
            raise ConfigurationError('task must be one of {}'.format(sorted(TASKS)))
        fusion_cfg = FusionConfig() if fusion_cfg is None else fusion_cfg
        if extractor is None:
            fusion_cfg = fusion_cfg.replace(fusion=False)
        rng = np.random.default_rng(seed)
        self.task = task
        self.arity = TASKS[task]
        self.freeze_extractor = freeze_extractor
        self.seed = seed
        self.fusion_cfg = fusion_cfg
        self.extractor = extractor
        self.fusion = FusionModule(fusion_cfg, rng)
        self.classifier = AttackClassifier(self.fusion.out_channels, self.arity, rng)
        self.eval()

    def __repr__(self):
        return 'ProfilingPipeline ({}-way {}, extractor {}, fusion {}, {} parameters)'.format(
            self.arity, self.task, 'none' if self.extractor is None else self.extractor.cfg.variant,
            self.fusion_cfg.fusion, self.num_parameters())

    @property
    def use_extractor(self):
        return self.extractor is not None

    def trainable_parameters(self):
        params = self.named_parameters()
        if self.freeze_extractor:
            params = {k: v for k, v in params.items() if not k.startswith('extractor.')}
        return list(params.values())

    def signature(self, x):
        if self.extractor is None:
            return x
        return self.extractor(x)[1]

    def features(self, x):
        return self.classifier.features(fuse(self.signature(x), x, self.fusion))

    def logits(self, x):
        return self.classifier.head(self.features(x))

    forward = logits

    def targets(self, attack_labels):
        attack_labels = np.asarray(attack_labels, dtype=np.int64)
        if self.task == 'attack':
            return attack_labels
        return np.array([family_of(a) for a in attack_labels], dtype=np.int64)


def predict_attack(pipeline, images, batch_size=64):
    """
    Probabilities and labels (attack or family, per pipeline task) for an
    N×3×H×W batch of adversarial images in [0, 1].
    """
    images = np.asarray(images, dtype=np.float32)
    probs = []
    for start in range(0, images.shape[0], batch_size):
        probs.append(softmax(pipeline.logits(Tensor(images[start:start + batch_size])), axis=-1).data)
    probs = np.concatenate(probs) if probs else np.zeros((0, pipeline.arity), dtype=np.float32)
    return probs, np.argmax(probs, axis=1)


def pipeline_features(pipeline, images, batch_size=64):
    images = np.asarray(images, dtype=np.float32)
    feats = [pipeline.features(Tensor(images[s:s + batch_size])).data for s in range(0, images.shape[0], batch_size)]
    if not feats:
        return np.zeros((0, pipeline.classifier.num_features), dtype=np.float32)
    return np.concatenate(feats)


def save_pipeline(pipeline, path, config_hash=None, lineage=None):
    config = dict(
        task=pipeline.task,
        seed=pipeline.seed,
        freeze_extractor=pipeline.freeze_extractor,
        fusion=pipeline.fusion_cfg.to_dict(),
        extractor=None if pipeline.extractor is None else pipeline.extractor.cfg.to_dict(),
        config_hash=config_hash,
        lineage={} if lineage is None else lineage,
    )
    save_checkpoint(path, 'PRC1', config, pipeline.state_dict())


def load_pipeline(path):
    config, tensors = load_checkpoint(path, 'PRC1')
    extractor = None
    if config['extractor'] is not None:
        extractor = SignatureExtractor(ExtractorConfig.from_dict(config['extractor']))
    pipeline = ProfilingPipeline(extractor, FusionConfig.from_dict(config['fusion']), task=config['task'],
                                 freeze_extractor=config['freeze_extractor'], seed=config['seed'])
    pipeline.load_state_dict(tensors)
    pipeline.eval()
    pipeline.config_hash = config.get('config_hash')
    pipeline.lineage = config.get('lineage', {})
    return pipeline
