"""
Image-agnostic perturbations: UAP (aggregated DeepFool steps) and UAN
(a small generator trained to fool the model on a construction set).
"""
from dataclasses import dataclass
import logging

import numpy as np
from tqdm import tqdm

from .attacktools import AttackKind, AttackConfig, project_norm, NORM_INF
from .errors import ContractError, NumericError, TrainingError
from .gradientattacks import deepfool_perturbation
from .layers import Module, ModuleList, Linear, Conv2d, Adam
from .numerics import Tensor, Tape, backward, reshape, upsample_nearest, gelu, tanh, clip, cross_entropy
from .targets import predict_batch, predict

logger = logging.getLogger(__name__)

MIN_CONSTRUCTION_IMAGES = 50


@dataclass
class UniversalPerturbation:
    kind: int
    rho: np.ndarray
    eps: float
    fooling_rate: float
    epochs: int
    reached_target: bool

    def apply(self, image):
        return np.clip(np.asarray(image, dtype=np.float32) + self.rho, 0., 1.)

    def save(self, path):
        np.savez(path, kind=self.kind, rho=self.rho, eps=self.eps, fooling_rate=self.fooling_rate,
                 epochs=self.epochs, reached_target=self.reached_target)

    @classmethod
    def load(cls, path):
        with np.load(path) as d:
            return cls(kind=int(d['kind']), rho=d['rho'].astype(np.float32), eps=float(d['eps']),
                       fooling_rate=float(d['fooling_rate']), epochs=int(d['epochs']),
                       reached_target=bool(d['reached_target']))


def fooling_rate(model, images, rho, labels=None):
    """Fraction of images whose decision changes under clip(x + rho)."""
    if labels is None:
        labels = predict_batch(model, images)
    adv = np.clip(images + rho[None], 0., 1.)
    return float(np.mean(predict_batch(model, adv) != labels))


def _check_construction_set(images):
    images = np.asarray(images, dtype=np.float32)
    if images.shape[0] < MIN_CONSTRUCTION_IMAGES:
        raise ContractError('universal perturbations need at least {} construction images, got {}'.format(
            MIN_CONSTRUCTION_IMAGES, images.shape[0]))
    return images


def uap_build(model, images, cfg=None, rng=None, verbose=False):
    """
    Universal adversarial perturbation.

    Each epoch visits the construction images in a seeded order; for every
    image still classified as its original label, a DeepFool step from
    clip(x + v) is added to v and v is projected back on the l∞ ball. The
    loop stops once the construction-set fooling rate reaches
    ``cfg.uap_delta`` or after ``cfg.uap_epochs`` epochs.

    Returns
    -------
    perturbation: UniversalPerturbation
    """
    cfg = AttackConfig() if cfg is None else cfg
    images = _check_construction_set(images)
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    v = np.zeros(images.shape[1:], dtype=np.float32)
    if cfg.uap_delta <= 0:
        return UniversalPerturbation(int(AttackKind.UAP), v, cfg.eps, 0., 0, True)

    labels = predict_batch(model, images)
    rate = 0.
    epochs = 0
    for epoch in range(cfg.uap_epochs):
        order = rng.permutation(images.shape[0])
        if verbose:
            order = tqdm(order, desc='uap epoch {}'.format(epoch + 1), leave=False)
        for i in order:
            x = np.clip(images[i] + v, 0., 1.)
            if predict(model, x)[1] != labels[i]:
                continue
            dr, _ = deepfool_perturbation(model, x, int(labels[i]), max_steps=cfg.deepfool_steps,
                                          overshoot=cfg.overshoot)
            v = project_norm(v + dr, NORM_INF, cfg.eps)
        epochs = epoch + 1
        assert np.max(np.abs(v)) <= cfg.eps + 1e-7
        rate = fooling_rate(model, images, v, labels)
        logger.info('uap epoch %d: fooling rate %.3f (target %.3f)', epochs, rate, cfg.uap_delta)
        if rate >= cfg.uap_delta:
            break
    return UniversalPerturbation(int(AttackKind.UAP), v, cfg.eps, rate, epochs, rate >= cfg.uap_delta)


class PerturbationGenerator(Module):
    """
    z -> dense -> (C, H/8, W/8) -> 3 x (nearest upsample x2, 3×3 conv, GELU)
    -> 3×3 conv to RGB -> tanh * eps
    """

    def __init__(self, image_shape, eps, rng, latent=16, channels=16):
        Module.__init__(self)
        _, h, w = image_shape
        assert h % 8 == 0 and w % 8 == 0
        self.eps = eps
        self.seed_shape = (1, channels, h // 8, w // 8)
        self.dense = Linear(latent, channels * (h // 8) * (w // 8), rng)
        self.ups = ModuleList(Conv2d(channels, channels, 3, rng) for _ in range(3))
        self.to_rgb = Conv2d(channels, 3, 3, rng)

    def forward(self, z):
        x = reshape(self.dense(z), self.seed_shape)
        for conv in self.ups:
            x = gelu(conv(upsample_nearest(x, 2)))
        return tanh(self.to_rgb(x)) * self.eps


def uan_train(model, images, cfg=None, verbose=False):
    """
    Universal adversarial network: a generator applied to a fixed seeded
    latent vector, trained to maximise the cross-entropy of the original
    labels over construction batches.

    Returns
    -------
    perturbation: UniversalPerturbation
        rho = project_norm(G(z)); fooling_rate on the construction set
    """
    cfg = AttackConfig() if cfg is None else cfg
    images = _check_construction_set(images)
    rng = np.random.default_rng(cfg.seed)
    generator = PerturbationGenerator(images.shape[1:], cfg.eps, rng, latent=cfg.uan_latent)
    z = Tensor(rng.standard_normal((1, cfg.uan_latent)).astype(np.float32))
    labels = predict_batch(model, images)
    params = generator.parameters()
    opt = Adam(params, lr=cfg.uan_lr)

    iteration = 0
    epochs = range(cfg.uan_epochs)
    if verbose:
        epochs = tqdm(epochs, desc='uan')
    for _ in epochs:
        order = rng.permutation(images.shape[0])
        for start in range(0, order.size, cfg.uan_batch):
            idx = order[start:start + cfg.uan_batch]
            try:
                with Tape() as tape:
                    rho = reshape(generator(z), images.shape[1:])
                    adv = clip(Tensor(images[idx]) + rho, 0., 1.)
                    loss = cross_entropy(model.logits(adv), labels[idx]) * -1.
                grads = backward(loss, tape, wrt=params)
            except NumericError:
                raise TrainingError('UAN loss diverged', iteration=iteration)
            opt.step(grads)
            iteration += 1
    rho = project_norm(generator(z).data[0].astype(np.float32), NORM_INF, cfg.eps)
    rate = fooling_rate(model, images, rho, labels)
    logger.info('uan: fooling rate %.3f after %d epochs', rate, cfg.uan_epochs)
    return UniversalPerturbation(int(AttackKind.UAN), rho, cfg.eps, rate, cfg.uan_epochs, rate >= cfg.uap_delta)
