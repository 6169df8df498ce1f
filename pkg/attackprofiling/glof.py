"""
Signature extractor: a stack of two-arm levels that carries a token stream
(global attention arm) and an image grid (local convolutional arm).

Internal layout is channel-first: the grid Z is N×D2×H×W and the tokens T
are N×N_tok×D1 in raster order of the P×P patches.

    T_0 = patch_embed(x), Z_0 = grid_embed(x)
    T_l, Z_l = level_l(T_{l-1}, Z_{l-1})        l = 1..L
    I_r = x - conv3(Z_L),  signature = x - I_r

Variants: 'glof' (both arms), 'glof-c' (convolutional arm only, tokens left
untouched and no token-to-image merge), 'glof-a' (attention arm only, the
grid is the token-to-image output).
"""
from dataclasses import dataclass
import logging

import numpy as np

from .configtools import ConfigMixin
from .errors import ConfigurationError, DimensionError
from .layers import (Module, ModuleList, Linear, Conv2d, BatchNorm2d, LayerNorm, MultiHeadAttention,
                     parameter, save_checkpoint, load_checkpoint)
from .numerics import Tensor, reshape, transpose, gelu, upsample_nearest

logger = logging.getLogger(__name__)

VARIANTS = ('glof', 'glof-c', 'glof-a')


@dataclass
class ExtractorConfig(ConfigMixin):
    levels: int = 2
    token_width: int = 64
    grid_width: int = 32
    patch: int = 4
    heads: int = 4
    variant: str = 'glof'
    image_size: int = 32
    seed: int = 0

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError('variant must be one of {}'.format(VARIANTS))
        if self.levels < 1:
            raise ConfigurationError('at least one level is needed')
        if self.image_size % self.patch != 0:
            raise ConfigurationError('image size {} is not divisible by patch {}'.format(self.image_size, self.patch))
        if self.heads < 1 or self.token_width % self.heads != 0:
            raise ConfigurationError('token width {} is not divisible by {} heads'.format(self.token_width, self.heads))
        return self

    @property
    def grid_side(self):
        return self.image_size // self.patch

    @property
    def num_tokens(self):
        return self.grid_side ** 2


@dataclass
class ExtractorState:
    tokens: Tensor
    grid: Tensor
    level: int


class PatchEmbed(Module):
    def __init__(self, cfg, rng):
        Module.__init__(self)
        self.patch = cfg.patch
        self.proj = Linear(3 * cfg.patch * cfg.patch, cfg.token_width, rng, scale=0.5)
        self.position = parameter(rng.standard_normal((cfg.num_tokens, cfg.token_width)) * 0.02)

    def forward(self, x):
        return patch_embed(x, self)


def patchify(x, patch):
    """N×3×H×W -> N×N_tok×(3·P·P), tokens in raster order."""
    n, c, h, w = x.shape
    if h % patch or w % patch:
        raise ConfigurationError('image {}x{} is not divisible by patch {}'.format(h, w, patch))
    x = reshape(x, (n, c, h // patch, patch, w // patch, patch))
    x = transpose(x, (0, 2, 4, 1, 3, 5))
    return reshape(x, (n, (h // patch) * (w // patch), c * patch * patch))


def patch_embed(image, embed):
    """
    Split into P×P patches, project each to D1 and add the learned
    positional embedding of its index.
    """
    single = image.ndim == 3
    x = reshape(image, (1,) + image.shape) if single else image
    tokens = embed.proj(patchify(x, embed.patch))
    if tokens.shape[1] != embed.position.shape[0]:
        raise ConfigurationError('{} tokens, positional table has {}'.format(tokens.shape[1], embed.position.shape[0]))
    tokens = tokens + embed.position
    return reshape(tokens, tokens.shape[1:]) if single else tokens


def grid_embed(image, conv):
    single = image.ndim == 3
    x = reshape(image, (1,) + image.shape) if single else image
    z = conv(x)
    return reshape(z, z.shape[1:]) if single else z


class TokenToImage(Module):
    """
    Tokens -> (H/P)×(W/P) grid -> nearest upsample ×P -> conv5+BN+GELU ->
    conv5+BN, giving D2 channels at full resolution.
    """

    def __init__(self, cfg, rng):
        Module.__init__(self)
        self.patch = cfg.patch
        self.conv1 = Conv2d(cfg.token_width, cfg.grid_width, 5, rng)
        self.bn1 = BatchNorm2d(cfg.grid_width)
        self.conv2 = Conv2d(cfg.grid_width, cfg.grid_width, 5, rng)
        self.bn2 = BatchNorm2d(cfg.grid_width)

    def forward(self, tokens, height, width):
        return t2i(tokens, self, height, width)


def tokens_to_grid(tokens, height, width, patch):
    """Token k goes to cell (k // (W/P), k % (W/P)); returns N×D1×(H/P)×(W/P)."""
    n, n_tok, d = tokens.shape
    gh, gw = height // patch, width // patch
    if n_tok != gh * gw:
        raise DimensionError('{} tokens cannot fill a {}x{} grid'.format(n_tok, gh, gw))
    return transpose(reshape(tokens, (n, gh, gw, d)), (0, 3, 1, 2))


def t2i(tokens, block, height, width):
    grid = upsample_nearest(tokens_to_grid(tokens, height, width, block.patch), block.patch)
    grid = gelu(block.bn1(block.conv1(grid)))
    return block.bn2(block.conv2(grid))


class GlofLevel(Module):
    def __init__(self, cfg, rng):
        Module.__init__(self)
        d1, d2 = cfg.token_width, cfg.grid_width
        # global arm
        self.norm1 = LayerNorm(d1)
        self.attention = MultiHeadAttention(d1, cfg.heads, rng)
        self.norm2 = LayerNorm(d1)
        self.ffn1 = Linear(d1, 2 * d1, rng)
        self.ffn2 = Linear(2 * d1, d1, rng, scale=0.5)
        # local arm
        self.conv1 = Conv2d(d2, d2, 5, rng)
        self.bn1 = BatchNorm2d(d2)
        self.conv2 = Conv2d(d2, d2, 5, rng, scale=0.5)
        self.bn2 = BatchNorm2d(d2)
        self.t2i = TokenToImage(cfg, rng)

    def global_arm(self, tokens):
        tokens = tokens + self.attention(self.norm1(tokens))
        return tokens + self.ffn2(gelu(self.ffn1(self.norm2(tokens))))

    def local_arm(self, grid):
        h = gelu(self.bn1(self.conv1(grid)))
        return gelu(grid + self.bn2(self.conv2(h)))

    def forward(self, tokens, grid, variant='glof'):
        return glof_forward(tokens, grid, self, variant)


def glof_forward(tokens, grid, level, variant='glof'):
    """
    One level of the recurrence.

    Returns
    -------
    tokens: Tensor
        N×N_tok×D1; the input object itself for 'glof-c'
    grid: Tensor
        N×D2×H×W
    """
    height, width = grid.shape[2], grid.shape[3]
    if variant == 'glof-c':
        return tokens, level.local_arm(grid)
    new_tokens = level.global_arm(tokens)
    merged = level.t2i(new_tokens, height, width)
    if variant == 'glof-a':
        new_grid = merged
    else:
        new_grid = level.local_arm(grid) + merged
    assert new_tokens.shape == tokens.shape and new_grid.shape == grid.shape
    return new_tokens, new_grid


class SignatureExtractor(Module):
    """
    Maps an adversarial batch N×3×H×W to (rectified image, signature).

    The final conv does not emit the rectified image itself: it predicts a
    residual r from the last grid, rectified = x - r and signature = r.
    """

    def __init__(self, cfg=None):
        Module.__init__(self)
        cfg = ExtractorConfig() if cfg is None else cfg
        self.cfg = cfg.validate()
        rng = np.random.default_rng(cfg.seed)
        self.patch_embed = PatchEmbed(cfg, rng)
        self.grid_embed = Conv2d(3, cfg.grid_width, 3, rng)
        self.levels = ModuleList(GlofLevel(cfg, rng) for _ in range(cfg.levels))
        self.to_rgb = Conv2d(cfg.grid_width, 3, 3, rng, scale=1e-3)
        self.eval()

    def __repr__(self):
        return 'SignatureExtractor {} (L={}, D1={}, D2={}, P={}, heads={}, {} parameters)'.format(
            self.cfg.variant, self.cfg.levels, self.cfg.token_width, self.cfg.grid_width, self.cfg.patch,
            self.cfg.heads, self.num_parameters())

    def states(self, x):
        """Token and grid features after embedding and after every level."""
        tokens = self.patch_embed(x)
        grid = grid_embed(x, self.grid_embed)
        states = [ExtractorState(tokens, grid, 0)]
        for l, level in enumerate(self.levels):
            tokens, grid = glof_forward(tokens, grid, level, self.cfg.variant)
            states.append(ExtractorState(tokens, grid, l + 1))
        return states

    def forward(self, x):
        """(x - to_rgb(Z_L), to_rgb(Z_L)); the signature is the predicted residual."""
        grid = self.states(x)[-1].grid
        rectified = x - self.to_rgb(grid)
        signature = x - rectified
        return rectified, signature


def extract_signature(extractor, image, batch_size=64):
    """
    Parameters
    ----------
    extractor: SignatureExtractor
    image: np.ndarray
        3×H×W or N×3×H×W in [0, 1]

    Returns
    -------
    rectified: np.ndarray
    signature: np.ndarray
        image - rectified
    """
    image = np.asarray(image, dtype=np.float32)
    single = image.ndim == 3
    batch = image[None] if single else image
    rectified, signature = [], []
    for start in range(0, batch.shape[0], batch_size):
        r, s = extractor(Tensor(batch[start:start + batch_size]))
        rectified.append(r.data)
        signature.append(s.data)
    rectified = np.concatenate(rectified) if rectified else np.zeros_like(batch)
    signature = np.concatenate(signature) if signature else np.zeros_like(batch)
    if single:
        return rectified[0], signature[0]
    return rectified, signature


def save_extractor(extractor, path, config_hash=None):
    config = dict(extractor=extractor.cfg.to_dict(), config_hash=config_hash)
    save_checkpoint(path, 'GLF1', config, extractor.state_dict())


def load_extractor(path):
    config, tensors = load_checkpoint(path, 'GLF1')
    extractor = SignatureExtractor(ExtractorConfig.from_dict(config['extractor']))
    extractor.load_state_dict(tensors)
    extractor.eval()
    extractor.config_hash = config.get('config_hash')
    return extractor
