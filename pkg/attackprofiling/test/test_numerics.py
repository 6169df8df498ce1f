import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_array_equal, assert_allclose

from attackprofiling.errors import ContractError, DimensionError, NumericError, ConfigurationError
from attackprofiling.numerics import (Tensor, Tape, backward, value_and_grad, grad_check, add, sub, mul, div,
                                      power, exp, log, tanh, sigmoid, gelu, matmul, reshape, transpose, concat,
                                      getitem, tsum, mean, amax, softmax, log_softmax, cross_entropy, mse_loss,
                                      conv2d, avg_pool2d, upsample_nearest, channel_affine, batch_norm, layer_norm,
                                      multi_head_attention)

seeds = st.integers(min_value=0, max_value=2 ** 31 - 1)


def make_weights(rng, *shape):
    return Tensor(rng.standard_normal(shape))


def make_unary_cases(rng):
    w = make_weights(rng, 4, 5)
    proj = make_projections(rng, 4)
    cases = {
        'exp': lambda x: exp(x),
        'log': lambda x: log(x * x + 1.),
        'tanh': lambda x: tanh(x),
        'sigmoid': lambda x: sigmoid(x),
        'gelu': lambda x: gelu(x),
        'power': lambda x: power(x * x + 1., 1.5),
        'div': lambda x: div(x, x * x + 2.),
        'matmul': lambda x: matmul(x, w),
        'reshape': lambda x: reshape(x, (2, 6)) * 3.,
        'transpose': lambda x: transpose(x, (1, 0)) * 2.,
        'concat': lambda x: concat([x, x * x], axis=1),
        'getitem': lambda x: getitem(x, (slice(1, 3), 2)) * x[0, 0],
        'mean': lambda x: mean(x * x, axis=0),
        'softmax': lambda x: softmax(x, axis=-1),
        'log_softmax': lambda x: log_softmax(x, axis=-1),
        'layer_norm': lambda x: layer_norm(x, Tensor(np.linspace(0.5, 1.5, 4)), Tensor(np.linspace(-1, 1, 4))),
        'mha': lambda x: multi_head_attention(reshape(x, (3, 4)), 2, proj),
    }
    return cases


def make_projections(rng, d):
    p = {k: Tensor(rng.standard_normal((d, d)) * 0.5) for k in ('wq', 'wk', 'wv', 'wo')}
    p.update({k: Tensor(rng.standard_normal(d) * 0.1) for k in ('bq', 'bk', 'bv', 'bo')})
    return p


@settings(max_examples=20, deadline=None)
@given(seed=seeds)
def test_grad_check_unary_ops(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 4))
    for name, op in make_unary_cases(rng).items():
        proj = np.random.default_rng(seed + 1)
        out_shape = op(Tensor(x)).shape
        r = Tensor(proj.standard_normal(out_shape))
        report = grad_check(lambda t: tsum(op(t) * r), x, tol=1e-3)
        assert report.passed, (name, report.max_rel_error)


@settings(max_examples=20, deadline=None)
@given(seed=seeds)
def test_grad_check_binary_broadcast(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 4))
    b = Tensor(rng.standard_normal((3, 4)))
    r = Tensor(rng.standard_normal((2, 3, 4)))
    for op in (add, sub, mul):
        assert grad_check(lambda t: tsum(op(t, b) * r), x, tol=1e-3).passed
    # gradient w.r.t. the broadcast operand is summed over the batch axis
    report = grad_check(lambda t: tsum(mul(Tensor(x), t) * r), b.data, tol=1e-3)
    assert report.passed


@settings(max_examples=20, deadline=None)
@given(seed=seeds)
def test_grad_check_spatial_ops(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 6, 6))
    w = Tensor(rng.standard_normal((4, 3, 3, 3)) * 0.3)
    b = Tensor(rng.standard_normal(4))
    cases = [
        lambda t: conv2d(t, w, b, padding=1),
        lambda t: conv2d(t, w, stride=3),
        lambda t: avg_pool2d(t, 2),
        lambda t: avg_pool2d(t, 3, stride=1, padding=1),
        lambda t: upsample_nearest(t, 2),
        lambda t: channel_affine(t, np.array([1., 2., .5]), np.array([0., -1., 1.])),
        lambda t: batch_norm(t, Tensor(np.ones(3) * 1.5), Tensor(np.zeros(3)), np.zeros(3), np.ones(3),
                             training=True),
        lambda t: batch_norm(t, Tensor(np.ones(3)), Tensor(np.ones(3)), np.full(3, 0.1), np.full(3, 2.),
                             training=False),
    ]
    for op in cases:
        r = Tensor(np.random.default_rng(seed + 1).standard_normal(op(Tensor(x)).shape))
        report = grad_check(lambda t: tsum(op(t) * r), x, max_coords=40, seed=seed, tol=1e-3)
        assert report.passed, report.max_rel_error


@settings(max_examples=20, deadline=None)
@given(seed=seeds)
def test_grad_check_losses(seed):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((5, 4))
    labels = rng.integers(0, 4, size=5)
    assert grad_check(lambda t: cross_entropy(t, labels), logits, tol=1e-3).passed
    target = Tensor(rng.standard_normal((5, 4)))
    assert grad_check(lambda t: mse_loss(t, target), logits, tol=1e-3).passed
    # amax is smooth away from ties
    assert grad_check(lambda t: tsum(amax(t, axis=-1) * Tensor(np.arange(1., 6.))), logits, tol=1e-3).passed


def test_grad_check_sigmoid_matrix():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal(4))
    W = rng.standard_normal((4, 4))
    report = grad_check(lambda w: tsum(sigmoid(matmul(w, reshape(x, (4, 1))))), W, fd_step=1e-4, tol=1e-4)
    assert report.passed
    assert report.n_coords == 16


def test_grad_check_sum_is_exact():
    x = np.random.default_rng(1).standard_normal((3, 3))
    report = grad_check(lambda t: tsum(t), x)
    assert report.max_rel_error < 1e-8
    assert_allclose(report.analytic, np.ones(9))


def test_grad_check_floor_keeps_small_gradients_relative():
    # the detached copy hides a 5e-6 slope from autodiff
    report = grad_check(lambda t: tsum(Tensor(t.data) * 5e-6), np.array([1., 2.]))
    assert_array_equal(report.analytic, [0., 0.])
    assert_allclose(report.numeric, [5e-6, 5e-6], rtol=1e-6)
    assert_allclose(report.max_rel_error, 1., rtol=1e-6)
    assert not report.passed
    assert not grad_check(lambda t: tsum(Tensor(t.data) * 5e-6), np.array([1., 2.]), tol=1e-3).passed


def test_value_and_grad():
    y, g = value_and_grad(lambda t: tsum(t * t), np.array([1., 2., 3.]))
    assert y.item() == 14.
    assert_array_equal(g, [2., 4., 6.])


def test_backward_small_examples():
    x = Tensor(np.array([3.]), requires_grad=True)
    with Tape() as tape:
        loss = tsum(x * x)
    assert_allclose(backward(loss, tape)[x], [6.])
    report = grad_check(lambda t: tsum(t * t), np.array([1., 2.]))
    assert_allclose(report.analytic, [2., 4.])
    assert report.max_rel_error < 1e-6
    # constant loss: x never reaches it
    with Tape() as tape:
        loss = tsum(Tensor(np.array([5.])) * 1.)
    assert_array_equal(backward(loss, tape, wrt=[x])[x], [0.])


def test_backward_unreachable_leaf_gets_zeros():
    a = Tensor(np.ones(3), requires_grad=True)
    b = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        loss = tsum(a * 2.)
    grads = backward(loss, tape, wrt=[a, b])
    assert_array_equal(grads[a], [2., 2., 2.])
    assert_array_equal(grads[b], np.zeros((2, 2)))


def test_backward_accumulates_shared_input():
    a = Tensor(np.array([3.]), requires_grad=True)
    with Tape() as tape:
        loss = tsum(a * a + a)
    assert_allclose(backward(loss, tape)[a], [7.])


def test_no_tape_no_records():
    a = Tensor(np.ones(3), requires_grad=True)
    out = a * 2.
    assert not out.requires_grad
    with Tape() as tape:
        out = Tensor(np.ones(3)) * 2.
    assert len(tape) == 0


def test_backward_needs_scalar():
    a = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        out = a * 2.
    with pytest.raises(ContractError):
        backward(out, tape)


def test_broadcast_rules():
    a = Tensor(np.ones((2, 3, 4)))
    add(a, Tensor(np.ones(4)))
    add(a, 2.)
    with pytest.raises(DimensionError):
        add(a, Tensor(np.ones((3, 1))))
    with pytest.raises(DimensionError):
        add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3))))


def test_non_finite_raises():
    with pytest.raises(NumericError):
        log(Tensor(np.zeros(2)))
    with pytest.raises(NumericError):
        Tensor(np.array([np.nan]))


def test_conv_extent_must_be_integral():
    x = Tensor(np.ones((1, 1, 5, 5)))
    w = Tensor(np.ones((1, 1, 2, 2)))
    with pytest.raises(ConfigurationError):
        conv2d(x, w, stride=2)
    assert conv2d(x, w, stride=1).shape == (1, 1, 4, 4)


def test_conv_matches_direct_sum():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1, 2, 4, 4))
    w = rng.standard_normal((3, 2, 3, 3))
    out = conv2d(Tensor(x), Tensor(w), padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    expected = np.zeros((1, 3, 4, 4))
    for o in range(3):
        for i in range(4):
            for j in range(4):
                expected[0, o, i, j] = np.sum(xp[0, :, i:i + 3, j:j + 3] * w[o])
    assert_allclose(out, expected, atol=1e-10)


def test_conv_small_examples():
    x = Tensor(np.array([[[[1., 2.], [3., 4.]]]]))
    w = Tensor(np.array([[[[1., 0.], [0., 1.]]]]))
    assert_array_equal(conv2d(x, w).data, [[[[5.]]]])
    # delta kernel is the identity
    rng = np.random.default_rng(5)
    image = rng.standard_normal((2, 3, 5, 5))
    delta = np.zeros((3, 3, 3, 3))
    for c in range(3):
        delta[c, c, 1, 1] = 1.
    assert_allclose(conv2d(Tensor(image), Tensor(delta), padding=1).data, image, atol=1e-10)


def test_softmax_rows():
    rng = np.random.default_rng(2)
    p = softmax(Tensor(rng.standard_normal((6, 5)) * 30)).data
    assert_allclose(p.sum(axis=1), np.ones(6), atol=1e-6)
    assert np.all(p >= 0)


def test_batch_norm_running_update():
    x = Tensor(np.arange(8.).reshape(2, 1, 2, 2))
    rm, rv = np.zeros(1), np.ones(1)
    batch_norm(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), rm, rv, training=True, momentum=0.9)
    assert_allclose(rm, [0.1 * 3.5])
    assert_allclose(rv, [0.9 + 0.1 * np.var(np.arange(8.), ddof=1)])


def test_attention_weights_rows_sum_to_one():
    rng = np.random.default_rng(4)
    tokens = Tensor(rng.standard_normal((2, 5, 8)))
    out, weights = multi_head_attention(tokens, 4, make_projections(rng, 8), return_weights=True)
    assert out.shape == (2, 5, 8)
    assert weights.shape == (2, 4, 5, 5)
    assert_allclose(weights.data.sum(axis=-1), np.ones((2, 4, 5)), atol=1e-10)
    with pytest.raises(ConfigurationError):
        multi_head_attention(tokens, 3, make_projections(rng, 8))


def test_attention_matches_dense_recomputation():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((3, 4))
    proj = make_projections(rng, 4)
    out = multi_head_attention(Tensor(x), 1, proj).data
    p = {name: t.data for name, t in proj.items()}
    q = x @ p['wq'] + p['bq']
    k = x @ p['wk'] + p['bk']
    v = x @ p['wv'] + p['bv']
    scores = q @ k.T / np.sqrt(4.)
    weights = np.exp(scores - scores.max(axis=1, keepdims=True))
    weights /= weights.sum(axis=1, keepdims=True)
    expected = weights @ v @ p['wo'] + p['bo']
    assert out.shape == (3, 4)
    assert_allclose(out, expected, atol=1e-6)


if __name__ == '__main__':
    test_grad_check_sigmoid_matrix()
    test_conv_matches_direct_sum()
    test_attention_weights_rows_sum_to_one()
