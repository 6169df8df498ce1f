"""
Minimal tensor algebra with reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array. Operations executed while a ``Tape`` is
active, and with at least one input that requires grad, are appended to the
tape together with a closure computing their vector-Jacobian product.
``backward`` walks the tape in reverse.

    x = Tensor(image, requires_grad=True)
    with Tape() as tape:
        loss = cross_entropy(model.logits(x), labels)
    grads = backward(loss, tape, wrt=[x])

Broadcasting is limited to leading batch dimensions: the smaller operand of a
binary op must be a scalar or match a trailing suffix of the larger shape.
"""

import threading
from collections import namedtuple

import numpy as np

from .errors import DimensionError, ConfigurationError, ContractError, NumericError

_state = threading.local()

GELU_C = np.sqrt(2.0 / np.pi)
GELU_A = 0.044715


def _active_tape():
    return getattr(_state, 'tape', None)


class Tensor:
    """
    n-dimensional real array with a ``requires_grad`` flag.

    Integer input is converted to float32; floating input keeps its dtype so
    that finite-difference checks can run in float64.
    """
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, name=None):
        data = np.asarray(data)
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float32)
        if not np.all(np.isfinite(data)):
            raise NumericError('Tensor data must be finite')
        self.data = data
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        name = '' if self.name is None else ' name={}'.format(self.name)
        return 'Tensor(shape={}, dtype={}, requires_grad={}{})'.format(
            self.shape, self.dtype, self.requires_grad, name)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


_Record = namedtuple('_Record', ['op', 'inputs', 'output', 'backward_fn'])


class Tape:
    """
    Ordered record of primitive operations.

    Records are appended in execution order, so the list is already a
    topological order of the computation. A tape belongs to the thread that
    activated it.
    """

    def __init__(self):
        self.records = []
        self._previous = None

    def __enter__(self):
        self._previous = _active_tape()
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = self._previous
        self._previous = None
        return False

    def __len__(self):
        return len(self.records)

    def record(self, op, inputs, output, backward_fn):
        self.records.append(_Record(op, tuple(inputs), output, backward_fn))


def _lift(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if (like is not None and np.ndim(x) == 0) else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(op, data, inputs, backward_fn):
    if not np.all(np.isfinite(data)):
        raise NumericError("'{}' produced non-finite values".format(op))
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    tape = _active_tape()
    out.requires_grad = tape is not None and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        tape.record(op, inputs, out, backward_fn)
    return out


def _sum_to_shape(grad, shape):
    # undo leading-dimension broadcasting
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a, b, op):
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    small, large = (a, b) if a.ndim < b.ndim else (b, a)
    if small.ndim == large.ndim or large.shape[large.ndim - small.ndim:] != small.shape:
        raise DimensionError("'{}': shapes {} and {} are not batch-compatible".format(op, a.shape, b.shape))


# elementwise binary

def add(a, b):
    a, b = _lift(a, b), _lift(b, a)
    _check_broadcast(a, b, 'add')

    def bw(g, needs):
        return (_sum_to_shape(g, a.shape) if needs[0] else None,
                _sum_to_shape(g, b.shape) if needs[1] else None)
    return _make('add', a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = _lift(a, b), _lift(b, a)
    _check_broadcast(a, b, 'sub')

    def bw(g, needs):
        return (_sum_to_shape(g, a.shape) if needs[0] else None,
                _sum_to_shape(-g, b.shape) if needs[1] else None)
    return _make('sub', a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = _lift(a, b), _lift(b, a)
    _check_broadcast(a, b, 'mul')

    def bw(g, needs):
        return (_sum_to_shape(g * b.data, a.shape) if needs[0] else None,
                _sum_to_shape(g * a.data, b.shape) if needs[1] else None)
    return _make('mul', a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = _lift(a, b), _lift(b, a)
    _check_broadcast(a, b, 'div')

    def bw(g, needs):
        return (_sum_to_shape(g / b.data, a.shape) if needs[0] else None,
                _sum_to_shape(-g * a.data / (b.data * b.data), b.shape) if needs[1] else None)
    return _make('div', a.data / b.data, (a, b), bw)


# elementwise unary

def neg(a):
    return _make('neg', -a.data, (a,), lambda g, needs: (-g,))


def power(a, exponent):
    if isinstance(exponent, Tensor):
        raise ContractError('power only supports a constant exponent')
    p = float(exponent)

    def bw(g, needs):
        return (g * p * a.data ** (p - 1),)
    return _make('pow', a.data ** p, (a,), bw)


def exp(a):
    out = np.exp(a.data)
    return _make('exp', out, (a,), lambda g, needs: (g * out,))


def log(a):
    with np.errstate(divide='ignore', invalid='ignore'):
        out = np.log(a.data)
    return _make('log', out, (a,), lambda g, needs: (g / a.data,))


def tanh(a):
    out = np.tanh(a.data)
    return _make('tanh', out, (a,), lambda g, needs: (g * (1 - out * out),))


def sigmoid(a):
    out = 0.5 * (np.tanh(0.5 * a.data) + 1)
    return _make('sigmoid', out, (a,), lambda g, needs: (g * out * (1 - out),))


def relu(a):
    mask = a.data > 0
    return _make('relu', a.data * mask, (a,), lambda g, needs: (g * mask,))


def gelu(a):
    """GELU, tanh approximation."""
    x = a.data
    t = np.tanh(GELU_C * (x + GELU_A * x ** 3))
    out = 0.5 * x * (1 + t)

    def bw(g, needs):
        dt = (1 - t * t) * GELU_C * (1 + 3 * GELU_A * x * x)
        return (g * (0.5 * (1 + t) + 0.5 * x * dt),)
    return _make('gelu', out, (a,), bw)


def clip(a, low, high):
    mask = (a.data >= low) & (a.data <= high)
    return _make('clip', np.clip(a.data, low, high), (a,), lambda g, needs: (g * mask,))


# linear algebra and shape

def matmul(a, b):
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError('matmul needs operands with at least 2 dimensions')
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError('matmul: inner extents differ {} vs {}'.format(a.shape, b.shape))

    def bw(g, needs):
        ga = gb = None
        if needs[0]:
            ga = _sum_to_shape(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if needs[1]:
            if b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _sum_to_shape(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb
    return _make('matmul', np.matmul(a.data, b.data), (a, b), bw)


def reshape(a, shape):
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError('cannot reshape {} to {}'.format(a.shape, shape))
    return _make('reshape', out, (a,), lambda g, needs: (g.reshape(a.shape),))


def transpose(a, axes):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make('transpose', a.data.transpose(axes), (a,), lambda g, needs: (g.transpose(inverse),))


def concat(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError('concat: incompatible shapes {}'.format([t.shape for t in tensors]))
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g, needs):
        return tuple(np.split(g, bounds, axis=axis))
    return _make('concat', out, tensors, bw)


def getitem(a, index):
    out = a.data[index]

    def bw(g, needs):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)
    return _make('getitem', np.array(out), (a,), bw)


def tsum(a, axis=None, keepdims=False):
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g, needs):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)
    return _make('sum', np.asarray(out), (a,), bw)


def mean(a, axis=None, keepdims=False):
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def amax(a, axis=-1, keepdims=False):
    out = np.max(a.data, axis=axis, keepdims=True)
    mask = (a.data == out).astype(a.dtype)
    mask /= mask.sum(axis=axis, keepdims=True)

    def bw(g, needs):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * mask,)
    return _make('amax', out if keepdims else np.squeeze(out, axis=axis), (a,), bw)


# probabilistic

def softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g, needs):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return _make('softmax', out, (a,), bw)


def log_softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def bw(g, needs):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)
    return _make('log_softmax', out, (a,), bw)


def cross_entropy(logits, labels):
    """
    Mean cross-entropy of N×K logits against integer labels.
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise DimensionError('cross_entropy expects N×K logits and N labels')
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ContractError('labels out of range [0, {})'.format(k))
    n = labels.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean()

    def bw(g, needs):
        grad = np.exp(logp)
        grad[np.arange(n), labels] -= 1
        return (grad * (g / n),)
    return _make('cross_entropy', np.asarray(loss, dtype=logits.dtype), (logits,), bw)


def mse_loss(a, b):
    diff = a - b
    return mean(diff * diff)


# spatial

def _output_extent(size, kernel, stride, padding, what):
    span = size + 2 * padding - kernel
    if span < 0 or span % stride != 0:
        raise ConfigurationError('{}: extent {} with kernel {}, stride {}, padding {} is not integral'.format(
            what, size, kernel, stride, padding))
    return span // stride + 1


def conv2d(x, w, b=None, stride=1, padding=0):
    """
    Cross-correlation of N×C×H×W input with O×C×K×K kernel.
    """
    if stride < 1 or padding < 0:
        raise ConfigurationError('conv2d needs stride >= 1 and padding >= 0')
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError('conv2d expects 4-d input and kernel, got {} and {}'.format(x.shape, w.shape))
    n, c, h, wd = x.shape
    o, c2, kh, kw = w.shape
    if c != c2:
        raise DimensionError('conv2d: input has {} channels, kernel expects {}'.format(c, c2))
    if b is not None and b.shape != (o,):
        raise DimensionError('conv2d: bias shape {} != ({},)'.format(b.shape, o))
    ho = _output_extent(h, kh, stride, padding, 'conv2d')
    wo = _output_extent(wd, kw, stride, padding, 'conv2d')
    s = stride
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data

    out = np.zeros((n, ho, wo, o), dtype=np.result_type(x.data, w.data))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + s * ho:s, j:j + s * wo:s]
            out += np.tensordot(patch, w.data[:, :, i, j], axes=([1], [1]))
    if b is not None:
        out += b.data
    out = out.transpose(0, 3, 1, 2)

    def bw(g, needs):
        gx = gw = gb = None
        gt = g.transpose(0, 2, 3, 1)
        if needs[0]:
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += np.tensordot(
                        gt, w.data[:, :, i, j], axes=([3], [0])).transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        if needs[1]:
            gw = np.zeros(w.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    patch = xp[:, :, i:i + s * ho:s, j:j + s * wo:s]
                    gw[:, :, i, j] = np.tensordot(g, patch, axes=([0, 2, 3], [0, 2, 3]))
        if len(needs) > 2 and needs[2]:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w) if b is None else (x, w, b)
    return _make('conv2d', out, inputs, bw)


def avg_pool2d(x, kernel, stride=None, padding=0):
    stride = kernel if stride is None else stride
    n, c, h, w = x.shape
    ho = _output_extent(h, kernel, stride, padding, 'avg_pool2d')
    wo = _output_extent(w, kernel, stride, padding, 'avg_pool2d')
    s = stride
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for i in range(kernel):
        for j in range(kernel):
            out += xp[:, :, i:i + s * ho:s, j:j + s * wo:s]
    scale = 1.0 / (kernel * kernel)
    out *= scale

    def bw(g, needs):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kernel):
            for j in range(kernel):
                gxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += g * scale
        return (gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp,)
    return _make('avg_pool2d', out, (x,), bw)


def upsample_nearest(x, factor):
    n, c, h, w = x.shape
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def bw(g, needs):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)
    return _make('upsample_nearest', out, (x,), bw)


def channel_affine(x, scale, shift):
    """
    y[:, c] = x[:, c] * scale[c] + shift[c] with constant scale / shift.
    """
    scale = np.asarray(scale, dtype=x.dtype)
    shift = np.asarray(shift, dtype=x.dtype)
    if x.ndim < 2 or scale.shape != (x.shape[1],) or shift.shape != (x.shape[1],):
        raise DimensionError('channel_affine: constants must have shape ({},)'.format(x.shape[1]))
    view = (1, -1) + (1,) * (x.ndim - 2)
    out = x.data * scale.reshape(view) + shift.reshape(view)
    return _make('channel_affine', out, (x,), lambda g, needs: (g * scale.reshape(view),))


# normalization

def batch_norm(x, gamma, beta, running_mean, running_var, training, momentum=0.9, eps=1e-5):
    """
    Batch normalization over every axis but the channel axis 1.

    In training mode batch statistics are used and the running buffers are
    updated in place: running = momentum * running + (1 - momentum) * batch.
    """
    axes = (0,) + tuple(range(2, x.ndim))
    view = (1, -1) + (1,) * (x.ndim - 2)
    m = x.size // x.shape[1]
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        unbiased = var * m / max(m - 1, 1)
        running_mean *= momentum
        running_mean += (1 - momentum) * mu
        running_var *= momentum
        running_var += (1 - momentum) * unbiased
    else:
        mu = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(view)) * inv_std.reshape(view)
    out = xhat * gamma.data.reshape(view) + beta.data.reshape(view)

    def bw(g, needs):
        gx = None
        dxhat = g * gamma.data.reshape(view)
        if needs[0]:
            if training:
                gx = (inv_std.reshape(view) / m) * (
                    m * dxhat - dxhat.sum(axis=axes).reshape(view)
                    - xhat * (dxhat * xhat).sum(axis=axes).reshape(view))
            else:
                gx = dxhat * inv_std.reshape(view)
        ggamma = (g * xhat).sum(axis=axes) if needs[1] else None
        gbeta = g.sum(axis=axes) if needs[2] else None
        return gx, ggamma, gbeta
    return _make('batch_norm', out, (x, gamma, beta), bw)


def layer_norm(x, gamma, beta, eps=1e-5):
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = xhat * gamma.data + beta.data

    def bw(g, needs):
        gx = None
        dxhat = g * gamma.data
        if needs[0]:
            gx = inv_std * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        ggamma = _sum_to_shape(g * xhat, gamma.shape) if needs[1] else None
        gbeta = _sum_to_shape(g, beta.shape) if needs[2] else None
        return gx, ggamma, gbeta
    return _make('layer_norm', out, (x, gamma, beta), bw)


# attention

def multi_head_attention(tokens, heads, projections, return_weights=False):
    """
    Multi-head scaled dot-product self-attention.

    Parameters
    ----------
    tokens: Tensor
        N_tok×D1, or B×N_tok×D1
    heads: int
        Number of heads, must divide D1
    projections: mapping
        'wq', 'wk', 'wv', 'wo' (D1×D1) and 'bq', 'bk', 'bv', 'bo' (D1,)
    return_weights: bool
        Also return the B×heads×N_tok×N_tok attention weights

    Returns
    -------
    out: Tensor
        Same shape as tokens
    """
    d = tokens.shape[-1]
    if heads < 1 or d % heads != 0:
        raise ConfigurationError('embedding width {} is not divisible by {} heads'.format(d, heads))
    batched = tokens.ndim == 3
    x = tokens if batched else reshape(tokens, (1,) + tokens.shape)
    bsz, n_tok, _ = x.shape
    dh = d // heads

    def split(t):
        return transpose(reshape(t, (bsz, n_tok, heads, dh)), (0, 2, 1, 3))

    q = split(matmul(x, projections['wq']) + projections['bq'])
    k = split(matmul(x, projections['wk']) + projections['bk'])
    v = split(matmul(x, projections['wv']) + projections['bv'])
    scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    weights = softmax(scores, axis=-1)
    context = reshape(transpose(matmul(weights, v), (0, 2, 1, 3)), (bsz, n_tok, d))
    out = matmul(context, projections['wo']) + projections['bo']
    if not batched:
        out = reshape(out, tokens.shape)
    if return_weights:
        return out, weights
    return out


# differentiation

def backward(loss, tape, wrt=None):
    """
    Reverse traversal of the tape.

    Parameters
    ----------
    loss: Tensor
        Scalar (size-1) tensor computed under ``tape``
    tape: Tape
        The tape the loss was recorded on
    wrt: list of Tensor or None
        Leaves to differentiate. If None every requires_grad leaf found on the
        tape is used. Leaves the loss does not depend on get zero gradient.

    Returns
    -------
    grads: dict
        Leaf Tensor -> np.ndarray gradient with the leaf's shape and dtype
    """
    if loss.size != 1:
        raise ContractError('backward needs a scalar loss, got shape {}'.format(loss.shape))

    if wrt is None:
        produced = set(id(r.output) for r in tape.records)
        seen = set()
        wrt = []
        for r in tape.records:
            for t in r.inputs:
                if t.requires_grad and id(t) not in produced and id(t) not in seen:
                    seen.add(id(t))
                    wrt.append(t)

    relevant = set(id(t) for t in wrt)
    for r in tape.records:
        if any(id(t) in relevant for t in r.inputs):
            relevant.add(id(r.output))

    grads = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for r in reversed(tape.records):
        g = grads.pop(id(r.output), None)
        if g is None:
            continue
        needs = [id(t) in relevant for t in r.inputs]
        if not any(needs):
            continue
        input_grads = r.backward_fn(g, needs)
        for t, need, gi in zip(r.inputs, needs, input_grads):
            if not need or gi is None:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi

    result = {}
    for t in wrt:
        g = grads.get(id(t))
        result[t] = np.zeros_like(t.data) if g is None else np.array(g, dtype=t.dtype).reshape(t.shape)
    return result


def value_and_grad(function, x):
    """
    Evaluate ``function(Tensor(x))`` and its gradient w.r.t. x.
    """
    xt = Tensor(x, requires_grad=True)
    with Tape() as tape:
        y = function(xt)
    return y, backward(y, tape, wrt=[xt])[xt]


GradCheckReport = namedtuple('GradCheckReport', ['max_rel_error', 'passed', 'n_coords', 'analytic', 'numeric'])


def grad_check(function, point, fd_step=1e-4, tol=1e-4, max_coords=None, seed=0, atol=1e-8):
    """
    Compare analytic gradients with central finite differences.

    The point is promoted to float64 so differences accumulate in 64 bits.

    Parameters
    ----------
    function: callable
        Tensor -> scalar Tensor
    point: Tensor or array
        Where to check
    fd_step: float
        Finite difference step
    tol: float
        Pass threshold on the maximum relative error
    max_coords: int or None
        Check a seeded random subset of this many coordinates
    seed: int
        Seed for the subset
    atol: float
        Floor of the relative error denominator, so that coordinates with a
        vanishing gradient are compared in absolute terms

    Returns
    -------
    report: GradCheckReport
        max over coordinates of |a - n| / max(|a|, |n|, atol), pass flag
    """
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    _, analytic = value_and_grad(function, x0.copy())
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)

    coords = np.arange(x0.size)
    if max_coords is not None and max_coords < x0.size:
        coords = np.sort(np.random.default_rng(seed).choice(x0.size, size=max_coords, replace=False))

    def evaluate(x):
        value = function(Tensor(x))
        value = float(np.asarray(value.data).reshape(-1)[0])
        if not np.isfinite(value):
            raise NumericError('function is not finite at the perturbed point')
        return value

    numeric = np.zeros(coords.size, dtype=np.float64)
    for n, idx in enumerate(coords):
        xp = x0.copy()
        xp.flat[idx] += fd_step
        xm = x0.copy()
        xm.flat[idx] -= fd_step
        numeric[n] = (evaluate(xp) - evaluate(xm)) / (2 * fd_step)

    a = analytic[coords]
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), atol)
    rel = np.abs(a - numeric) / denom
    max_rel = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(max_rel, max_rel <= tol, int(coords.size), a, numeric)
