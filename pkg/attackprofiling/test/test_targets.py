import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_array_equal, assert_allclose

from attackprofiling.errors import ConfigurationError, ContractError, QueryBudgetExceeded
from attackprofiling.numerics import Tensor, tsum, grad_check
from attackprofiling.shapeset import shapeset_generate, split_benign
from attackprofiling.targets import (MODEL_FAMILIES, ArchitectureSpec, TrainConfig, build_target, predict,
                                     predict_batch, accuracy, train_target, DecisionOracle, save_target,
                                     load_target)


def make_tiny_target(family, seed=0):
    spec = ArchitectureSpec(family=family, depth=2, width=8, num_classes=4)
    return build_target(spec, seed)


def make_images(n, size=8, seed=0):
    return np.random.default_rng(seed).uniform(size=(n, 3, size, size)).astype(np.float32)


def test_architecture_validation():
    for bad in (dict(family='vgg'), dict(depth=0), dict(width=2), dict(family='incep', width=10)):
        with pytest.raises(ConfigurationError):
            ArchitectureSpec(**bad).validate()
    ArchitectureSpec(family='incep', width=12).validate()


def test_three_families_predict():
    images = make_images(5)
    for family in MODEL_FAMILIES:
        model = make_tiny_target(family)
        assert model.model_id == MODEL_FAMILIES.index(family)
        assert not model.training
        logits, label = predict(model, images[0])
        assert logits.shape == (4,)
        assert label == int(np.argmax(logits))
        labels = predict_batch(model, images)
        assert labels.shape == (5,)
        assert labels[0] == label


def test_build_is_seeded():
    a = make_tiny_target('res', seed=3)
    b = make_tiny_target('res', seed=3)
    c = make_tiny_target('res', seed=4)
    assert_array_equal(a.net.stem.weight.data, b.net.stem.weight.data)
    assert not np.array_equal(a.net.stem.weight.data, c.net.stem.weight.data)


def test_pixel_range_contract():
    model = make_tiny_target('res')
    image = make_images(1)[0]
    image[0, 0, 0] = 1.5
    with pytest.raises(ContractError):
        predict(model, image)
    # uint8 input is read as 8-bit pixels
    predict(model, np.full((3, 8, 8), 255, dtype=np.uint8))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(min_value=0, max_value=2 ** 31 - 1))
def test_input_gradients(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.1, 0.9, size=(2, 3, 8, 8))
    weights = Tensor(rng.standard_normal((2, 4)))
    for family in MODEL_FAMILIES:
        model = make_tiny_target(family, seed=seed % 1000)
        report = grad_check(lambda t: tsum(model.logits(t) * weights), x, fd_step=1e-5, tol=1e-3,
                            max_coords=20, seed=seed)
        assert report.passed, (family, report.max_rel_error)


def test_oracle_budget():
    model = make_tiny_target('dense')
    images = make_images(4)
    oracle = DecisionOracle(model, budget=5)
    assert oracle(images[0]) == predict(model, images[0])[1]
    oracle.predict_batch(images)
    assert oracle.queries == 5
    assert oracle.remaining == 0
    with pytest.raises(QueryBudgetExceeded):
        oracle(images[0])
    assert oracle.queries == 5
    unbounded = DecisionOracle(model)
    unbounded.predict_batch(images)
    assert unbounded.remaining is None


def test_save_load(tmp_path):
    model = make_tiny_target('incep', seed=2)
    model.norm_mean = np.array([0.1, 0.2, 0.3], dtype=np.float32)
    path = tmp_path / 'incep.prm'
    save_target(model, path, config_hash='abc')
    loaded = load_target(path)
    assert loaded.config_hash == 'abc'
    assert loaded.spec == model.spec
    images = make_images(3)
    assert_allclose(loaded.logits(Tensor(images)).data, model.logits(Tensor(images)).data, rtol=1e-6)


def test_train_smoke():
    store = split_benign(shapeset_generate(6, classes=4, size=8, seed=0))
    model = make_tiny_target('res')
    model, history = train_target(model, store, TrainConfig(epochs=2, batch_size=8))
    assert list(history.columns) == ['epoch', 'loss', 'train_accuracy', 'test_accuracy']
    assert list(history['epoch']) == [0, 1, 2]
    assert np.isnan(history['loss'].iloc[0])
    assert np.all(np.isfinite(history['loss'].iloc[1:]))
    assert not model.training
    assert np.all(model.norm_std > 0)

    model, history = train_target(make_tiny_target('res'), store, TrainConfig(epochs=0))
    assert len(history) == 1


def test_untrained_accuracy_near_chance():
    store = split_benign(shapeset_generate(20, classes=10, size=16, seed=1))
    images, labels, _ = store.get_split('test')
    accs = []
    for seed in range(5):
        spec = ArchitectureSpec(family='res', depth=2, width=8, num_classes=10)
        accs.append(accuracy(build_target(spec, seed), images, labels))
    assert 0.05 <= np.mean(accs) <= 0.20


@pytest.mark.slow
def test_trained_accuracy():
    store = split_benign(shapeset_generate(500, classes=10, seed=7), seed=7)
    model = build_target(ArchitectureSpec(family='res'), seed=7)
    model, history = train_target(model, store, TrainConfig(seed=7))
    assert history['test_accuracy'].iloc[-1] >= 0.90


if __name__ == '__main__':
    test_three_families_predict()
    test_oracle_budget()
