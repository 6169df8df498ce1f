"""
Parameterised building blocks on top of numerics, the Adam optimizer and the
named-tensor checkpoint encoding shared by every model file.

Checkpoint layout (all integers little-endian):

    magic            4 bytes
    config length    u32, followed by UTF-8 JSON (sorted keys)
    tensor count     u32
    per tensor       u16 name length, name, u8 ndim, u32 per extent,
                     float32 LE values in row-major order
"""
from collections import OrderedDict
import hashlib
import json
import logging
import struct

import numpy as np

from .numerics import (Tensor, matmul, conv2d, batch_norm, layer_norm, multi_head_attention, gelu, concat)
from .errors import FormatError, DimensionError

logger = logging.getLogger(__name__)


class Module:
    """
    Container of parameters, buffers and sub-modules.

    Attribute assignment registers a ``Tensor`` as a parameter and a
    ``Module`` as a child; buffers (non-trainable arrays such as running
    statistics) are registered with ``register_buffer``.
    """

    def __init__(self):
        object.__setattr__(self, '_parameters', OrderedDict())
        object.__setattr__(self, '_buffers', OrderedDict())
        object.__setattr__(self, '_modules', OrderedDict())
        object.__setattr__(self, 'training', True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._parameters[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, array):
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def __call__(self, *args, **kargs):
        return self.forward(*args, **kargs)

    def forward(self, *args, **kargs):
        raise NotImplementedError

    def named_parameters(self, prefix=''):
        params = OrderedDict()
        for name, p in self._parameters.items():
            params[prefix + name] = p
        for name, m in self._modules.items():
            params.update(m.named_parameters(prefix + name + '.'))
        return params

    def parameters(self):
        return list(self.named_parameters().values())

    def named_buffers(self, prefix=''):
        buffers = OrderedDict()
        for name, b in self._buffers.items():
            buffers[prefix + name] = b
        for name, m in self._modules.items():
            buffers.update(m.named_buffers(prefix + name + '.'))
        return buffers

    def num_parameters(self):
        return int(sum(p.size for p in self.parameters()))

    def train(self, mode=True):
        object.__setattr__(self, 'training', mode)
        for m in self._modules.values():
            m.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def state_dict(self):
        state = OrderedDict()
        for name, p in self.named_parameters().items():
            state[name] = p.data
        for name, b in self.named_buffers().items():
            state[name] = b
        return state

    def load_state_dict(self, state):
        params = self.named_parameters()
        buffers = self.named_buffers()
        missing = [k for k in list(params) + list(buffers) if k not in state]
        if missing:
            raise FormatError('missing tensors in state: {}'.format(missing[:5]))
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float32)
            if value.shape != p.shape:
                raise DimensionError('{}: stored shape {} != {}'.format(name, value.shape, p.shape))
            p.data = value.copy()
        for name, b in buffers.items():
            value = np.asarray(state[name], dtype=b.dtype)
            if value.shape != b.shape:
                raise DimensionError('{}: stored shape {} != {}'.format(name, value.shape, b.shape))
            b[...] = value

    def copy_from(self, other):
        self.load_state_dict(other.state_dict())
        return self


class ModuleList(Module):
    def __init__(self, modules=()):
        Module.__init__(self)
        object.__setattr__(self, '_items', [])
        for m in modules:
            self.append(m)

    def append(self, module):
        name = str(len(self._items))
        self._modules[name] = module
        self._items.append(module)

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def __getitem__(self, i):
        return self._items[i]


def parameter(array):
    return Tensor(np.asarray(array, dtype=np.float32), requires_grad=True)


def he_normal(rng, shape, fan_in, scale=1.0):
    return rng.standard_normal(shape) * (scale * np.sqrt(2.0 / fan_in))


class Linear(Module):
    """y = x @ W + b over the last axis; W is in×out."""

    def __init__(self, in_features, out_features, rng, bias=True, scale=1.0):
        Module.__init__(self)
        self.weight = parameter(he_normal(rng, (in_features, out_features), in_features, scale))
        self.bias = parameter(np.zeros(out_features)) if bias else None

    def forward(self, x):
        y = matmul(x, self.weight)
        if self.bias is not None:
            y = y + self.bias
        return y


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, rng, stride=1, padding=None,
                 bias=True, scale=1.0):
        Module.__init__(self)
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = parameter(he_normal(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in, scale))
        self.bias = parameter(np.zeros(out_channels)) if bias else None

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.9, eps=1e-5):
        Module.__init__(self)
        self.momentum = momentum
        self.eps = eps
        self.gamma = parameter(np.ones(channels))
        self.beta = parameter(np.zeros(channels))
        self.register_buffer('running_mean', np.zeros(channels, dtype=np.float32))
        self.register_buffer('running_var', np.ones(channels, dtype=np.float32))

    def forward(self, x):
        return batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                          training=self.training, momentum=self.momentum, eps=self.eps)


class DenseLayer(Module):
    """BN-GELU-conv3 producing ``growth`` maps, concatenated to its input."""

    def __init__(self, in_channels, growth, rng):
        Module.__init__(self)
        self.bn = BatchNorm2d(in_channels)
        self.conv = Conv2d(in_channels, growth, 3, rng)

    def forward(self, x):
        return concat([x, self.conv(gelu(self.bn(x)))], axis=1)


class LayerNorm(Module):
    def __init__(self, width, eps=1e-5):
        Module.__init__(self)
        self.eps = eps
        self.gamma = parameter(np.ones(width))
        self.beta = parameter(np.zeros(width))

    def forward(self, x):
        return layer_norm(x, self.gamma, self.beta, eps=self.eps)


class MultiHeadAttention(Module):
    def __init__(self, width, heads, rng):
        Module.__init__(self)
        self.heads = heads
        std = 1.0 / np.sqrt(width)
        for name in ('wq', 'wk', 'wv', 'wo'):
            setattr(self, name, parameter(rng.standard_normal((width, width)) * std))
        for name in ('bq', 'bk', 'bv', 'bo'):
            setattr(self, name, parameter(np.zeros(width)))

    def projections(self):
        return {k: self._parameters[k] for k in ('wq', 'wk', 'wv', 'wo', 'bq', 'bk', 'bv', 'bo')}

    def forward(self, tokens, return_weights=False):
        return multi_head_attention(tokens, self.heads, self.projections(), return_weights=return_weights)


class Adam:
    """
    Adam with step decay: lr_t = lr * decay_rate ** (t // decay_every), t
    counting completed steps.

    Parameters
    ----------
    params: dict or list
        Tensors to update in place
    lr: float
    beta1, beta2: float
    eps: float
    decay_rate: float
        Multiplier applied every ``decay_every`` steps
    decay_every: int
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8,
                 decay_rate=1.0, decay_every=1000):
        if isinstance(params, dict):
            params = list(params.values())
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.decay_rate = decay_rate
        self.decay_every = decay_every
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def current_lr(self):
        return self.lr * self.decay_rate ** (self.t // self.decay_every)

    def step(self, grads):
        lr = self.current_lr()
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = grads.get(p)
            if g is None:
                continue
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.dtype)


# checkpoint encoding

def config_hash(config):
    """First 16 hex chars of the SHA-256 of the sorted-key JSON."""
    text = json.dumps(config, sort_keys=True, default=str)
    return hashlib.sha256(text.encode('utf-8')).hexdigest()[:16]


def dumps_checkpoint(magic, config, tensors):
    assert len(magic) == 4
    chunks = [magic.encode('ascii')]
    cfg = json.dumps(config, sort_keys=True).encode('utf-8')
    chunks.append(struct.pack('<I', len(cfg)))
    chunks.append(cfg)
    chunks.append(struct.pack('<I', len(tensors)))
    for name, array in tensors.items():
        array = np.asarray(array)
        raw = name.encode('utf-8')
        chunks.append(struct.pack('<H', len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack('<B', array.ndim))
        chunks.append(struct.pack('<{}I'.format(array.ndim), *array.shape))
        chunks.append(np.ascontiguousarray(array, dtype='<f4').tobytes())
    return b''.join(chunks)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.offset = 0

    def take(self, n, what):
        if self.offset + n > len(self.data):
            raise FormatError('truncated {}'.format(what), offset=self.offset)
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt, what):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))


def loads_checkpoint(data, magic):
    """
    Returns
    -------
    config: dict
    tensors: OrderedDict
        name -> float32 np.ndarray
    """
    reader = _Reader(data)
    found = reader.take(4, 'magic')
    if found != magic.encode('ascii'):
        raise FormatError('bad magic {!r}, expected {!r}'.format(found, magic), offset=0)
    (n,) = reader.unpack('<I', 'config length')
    start = reader.offset
    try:
        config = json.loads(reader.take(n, 'config').decode('utf-8'))
    except (UnicodeDecodeError, ValueError):
        raise FormatError('unreadable config block', offset=start)
    (count,) = reader.unpack('<I', 'tensor count')
    tensors = OrderedDict()
    for _ in range(count):
        (name_len,) = reader.unpack('<H', 'name length')
        name = reader.take(name_len, 'tensor name').decode('utf-8')
        (ndim,) = reader.unpack('<B', 'ndim')
        shape = reader.unpack('<{}I'.format(ndim), 'shape')
        n_values = int(np.prod(shape)) if ndim else 1
        raw = reader.take(4 * n_values, 'tensor ' + name)
        tensors[name] = np.frombuffer(raw, dtype='<f4').reshape(shape).astype(np.float32)
    if reader.offset != len(data):
        raise FormatError('trailing bytes after last tensor', offset=reader.offset)
    return config, tensors


def save_checkpoint(path, magic, config, tensors):
    with open(path, 'wb') as f:
        f.write(dumps_checkpoint(magic, config, tensors))
    logger.info('wrote %s checkpoint %s (%d tensors)', magic, path, len(tensors))


def load_checkpoint(path, magic):
    with open(path, 'rb') as f:
        data = f.read()
    return loads_checkpoint(data, magic)
