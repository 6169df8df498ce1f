import numpy as np
import pytest
from numpy.testing import assert_array_equal, assert_allclose

from attackprofiling.errors import ConfigurationError, ContractError
from attackprofiling.layers import Module, Linear
from attackprofiling.numerics import reshape
from attackprofiling.targets import ArchitectureSpec, ClassifierModel, DecisionOracle, predict, build_target
from attackprofiling.attacktools import (AttackKind, AttackConfig, ATTACK_NAMES, NORM_INF, NORM_L2, family_of,
                                         family_array, norm_of, sample_eps, eps_from_k, k_from_eps, project_norm,
                                         lp_norm)
from attackprofiling.attacks import run_attack, as_kind
from attackprofiling.gradientattacks import fgsm, iterative_gradient, deepfool, newtonfool, carlini_wagner
from attackprofiling.decisionattacks import severity_search, apply_distortion
from attackprofiling.universalattacks import uap_build, uan_train, fooling_rate

SHAPE = (3, 4, 4)


class AffineNet(Module):
    def __init__(self, num_pixels, num_classes, rng):
        Module.__init__(self)
        self.linear = Linear(num_pixels, num_classes, rng)

    def forward(self, x):
        return self.linear(reshape(x, (x.shape[0], -1)))


def make_affine_model(seed=0, num_classes=3, shape=SHAPE):
    rng = np.random.default_rng(seed)
    m = int(np.prod(shape))
    net = AffineNet(m, num_classes, rng)
    net.linear.weight.data = rng.standard_normal((m, num_classes)).astype(np.float32)
    model = ClassifierModel(ArchitectureSpec(num_classes=num_classes), net, model_id=0)
    model.eval()
    return model


def make_image(seed=0, shape=SHAPE, low=0.4, high=0.6):
    return np.random.default_rng(seed).uniform(low, high, size=shape).astype(np.float32)


def affine_logits(model, image):
    return image.reshape(-1).astype(np.float64) @ model.net.linear.weight.data + model.net.linear.bias.data


def test_attack_vocabulary():
    assert len(ATTACK_NAMES) == 13
    assert [family_of(a) for a in range(13)] == [0] * 6 + [1] * 5 + [2] * 2
    assert_array_equal(family_array([0, 7, 12]), [0, 1, 2])
    assert {a for a in range(13) if norm_of(a) == NORM_L2} == {4, 5, 6, 10}
    with pytest.raises(ContractError):
        family_of(13)
    assert as_kind('SaltPepper') == AttackKind.SALT_PEPPER
    with pytest.raises(ContractError):
        as_kind('Nope')


def test_eps_units():
    assert eps_from_k(8, NORM_INF, 3072) == 8 / 255.
    assert_allclose(eps_from_k(2, NORM_L2, 3072), 2 / 255. * np.sqrt(3072))
    assert k_from_eps(eps_from_k(5, NORM_L2, 3072), NORM_L2, 3072) == 5
    rng = np.random.default_rng(0)
    ks = [sample_eps(AttackKind.FGSM, rng)[1] for _ in range(500)]
    assert min(ks) == 1 and max(ks) == 16
    ks = [sample_eps(AttackKind.CW, rng)[1] for _ in range(500)]
    assert min(ks) == 1 and max(ks) == 10


def test_project_norm():
    v = np.array([3., -4., 0.5])
    assert_array_equal(project_norm(v, NORM_INF, 1.), [1., -1., 0.5])
    p = project_norm(v, NORM_L2, 1.)
    assert_allclose(lp_norm(p, NORM_L2), 1.)
    assert_array_equal(project_norm(v * 0.01, NORM_L2, 1.), v * 0.01)
    with pytest.raises(ConfigurationError):
        project_norm(v, NORM_INF, -1.)


def test_fgsm_closed_form():
    model = make_affine_model(1)
    image = make_image(2)
    cfg = AttackConfig(eps=4 / 255.)
    logits = affine_logits(model, image)
    label = int(np.argmax(logits))
    p = np.exp(logits - logits.max())
    p /= p.sum()
    grad = model.net.linear.weight.data @ (p - np.eye(3)[label])
    expected = np.clip(image + cfg.eps * np.sign(grad).reshape(SHAPE), 0., 1.)
    result = fgsm(model, image, cfg=cfg)
    assert_allclose(result.adv_image, expected, atol=1e-6)
    assert result.achieved_norm <= cfg.eps + 1e-7


def test_one_step_bim_equals_fgsm():
    model = build_target(ArchitectureSpec(depth=2, width=8, num_classes=4), seed=0)
    image = make_image(3, shape=(3, 8, 8), low=0., high=1.)
    cfg = AttackConfig(eps=6 / 255., steps=1, step_size=6 / 255.)
    a = fgsm(model, image, cfg=cfg)
    b = iterative_gradient(model, image, cfg=cfg, random_start=False)
    assert_array_equal(a.perturbation, b.perturbation)
    assert_array_equal(a.adv_image, b.adv_image)


def test_pgd_stays_in_ball():
    model = make_affine_model(4)
    image = make_image(5, low=0., high=1.)
    cfg = AttackConfig(eps=8 / 255., steps=5)
    seen = []
    result = iterative_gradient(model, image, cfg=cfg, random_start=True, rng=np.random.default_rng(0),
                                callback=seen.append)
    assert len(seen) == 5
    assert result.kind == AttackKind.PGD
    assert np.max(np.abs(result.perturbation)) <= cfg.eps + 1e-7
    for x in seen:
        assert np.max(np.abs(x - image)) <= cfg.eps + 1e-6


def test_deepfool_closed_form():
    model = make_affine_model(6)
    image = make_image(7)
    w = model.net.linear.weight.data.astype(np.float64)
    target_logits = np.array([0.1, 0., -0.1])
    model.net.linear.bias.data = (target_logits - image.reshape(-1) @ w).astype(np.float32)
    logits = affine_logits(model, image)
    # closest linearised boundary away from class 0
    best = None
    for k in (1, 2):
        wk = w[:, k] - w[:, 0]
        dist = abs(logits[k] - logits[0]) / np.linalg.norm(wk)
        if best is None or dist < best[0]:
            best = (dist, abs(logits[k] - logits[0]) / np.sum(wk * wk) * wk)
    cfg = AttackConfig(eps=10., norm=NORM_L2, overshoot=0.02)
    result = deepfool(model, image, cfg)
    assert result.iterations == 1
    assert result.success
    assert_allclose(result.perturbation.reshape(-1), 1.02 * best[1], rtol=1e-3, atol=1e-6)


def test_contrast_severity_matches_scan():
    checked = 0
    seed = 0
    while checked < 20:
        seed += 1
        model = make_affine_model(seed)
        image = make_image(seed + 1000, low=0., high=1.)
        clean = int(np.argmax(affine_logits(model, image)))
        severities = np.linspace(0., 1., 257)
        labels = [int(np.argmax(affine_logits(model, (1 - s) * image + s * 0.5))) for s in severities]
        fooled = np.array(labels) != clean
        if not fooled[-1]:
            continue
        checked += 1
        cfg = AttackConfig(eps=1., norm=NORM_INF, severity_steps=12)
        oracle = DecisionOracle(model)
        result = severity_search(oracle, image, AttackKind.CONTRAST_REDUCTION, cfg)
        hi, lo = result.info['severity'], result.info['severity_low']
        first = severities[np.argmax(fooled)]
        assert result.success
        assert hi - lo <= 2 ** -12 + 1e-12
        assert first - 1 / 256. - 1e-3 <= hi <= first + 1e-3
        assert oracle.queries == 2 + 12


def test_severity_no_fool_returns_max():
    model = make_affine_model(0)
    image = np.full(SHAPE, 0.5, dtype=np.float32)
    # the grey image is its own maximum-contrast-reduction, so nothing can fool
    result = severity_search(DecisionOracle(model), image, 'contrast', AttackConfig(eps=1.))
    assert not result.success
    assert result.info['severity'] == 1.


def test_distortions_at_zero_severity():
    image = make_image(0)
    noise = np.random.default_rng(0).standard_normal(SHAPE).astype(np.float32)
    for distortion, state in (('gaussian', noise), ('blur', None), ('contrast', None)):
        assert_array_equal(apply_distortion(image, distortion, 0., state), image)
    with pytest.raises(ConfigurationError):
        apply_distortion(image, 'swirl', 0.5)


def test_boundary_distances_never_increase():
    model = make_affine_model(8)
    image = make_image(9, low=0., high=1.)
    cfg = AttackConfig(eps=100., max_queries=300, seed=3)
    result = run_attack(AttackKind.BOUNDARY, model, image, cfg=cfg)
    distances = result.info['distances']
    assert len(distances) >= 1
    assert np.all(np.diff(distances) <= 0)
    assert result.queries_used <= 300
    assert result.norm == NORM_L2


def test_run_attack_invariants():
    model = make_affine_model(12, shape=(3, 8, 8))
    image = make_image(10, shape=(3, 8, 8), low=0., high=1.)
    rng = np.random.default_rng(0)
    base = AttackConfig(steps=3, deepfool_steps=5, newton_steps=5, cw_steps=5, cw_search_steps=2,
                        max_queries=200, severity_steps=6)
    for kind in range(11):
        eps, _ = sample_eps(kind, rng, image.shape)
        result = run_attack(kind, model, image, cfg=base.replace(eps=eps), rng=np.random.default_rng(kind))
        assert result.kind == kind
        assert result.norm == norm_of(kind)
        assert result.achieved_norm <= eps + 1e-5
        assert_array_equal(result.adv_image, np.clip(image + result.perturbation, 0., 1.))
        assert result.clean_label == predict(model, image)[1]
        assert result.success == (predict(model, result.adv_image)[1] != result.clean_label)
        if kind >= AttackKind.ADDITIVE_GAUSSIAN:
            assert result.queries_used <= 200


def test_universal_needs_construction_set():
    model = make_affine_model(0)
    images = np.stack([make_image(i) for i in range(10)])
    with pytest.raises(ContractError):
        uap_build(model, images)
    with pytest.raises(ConfigurationError):
        run_attack(AttackKind.UAP, model, images[0])


def test_uap_and_uan():
    shape = (3, 8, 8)
    model = make_affine_model(11, shape=shape)
    images = np.stack([make_image(i, shape=shape, low=0., high=1.) for i in range(60)])
    cfg = AttackConfig(eps=10 / 255., uap_delta=0.3, uap_epochs=2, deepfool_steps=10, uan_epochs=1, uan_batch=20)
    uap = uap_build(model, images, cfg)
    assert uap.kind == AttackKind.UAP
    assert np.max(np.abs(uap.rho)) <= cfg.eps + 1e-7
    assert 1 <= uap.epochs <= 2
    assert uap.fooling_rate == fooling_rate(model, images, uap.rho)
    result = run_attack(AttackKind.UAP, model, images[0], cfg=cfg, universal=uap)
    assert_array_equal(result.perturbation, project_norm(uap.rho, NORM_INF, cfg.eps))

    uan = uan_train(model, images, cfg)
    assert uan.kind == AttackKind.UAN
    assert uan.rho.shape == shape
    assert np.max(np.abs(uan.rho)) <= cfg.eps + 1e-7




def softmax_probability(model, image, label):
    logits = affine_logits(model, image)
    e = np.exp(logits - logits.max())
    return e[label] / e.sum()


def test_newtonfool_lowers_probability():
    model = make_affine_model(3)
    image = make_image(4)
    with pytest.raises(ContractError):
        newtonfool(model, image, AttackConfig(newton_steps=0))
    with pytest.raises(ConfigurationError):
        newtonfool(model, image, AttackConfig(newton_eta=1.))

    iterates = []
    result = newtonfool(model, image, AttackConfig(eps=10., norm=NORM_L2, newton_steps=20), callback=iterates.append)
    assert result.iterations == len(iterates) > 0
    label = result.clean_label
    p0 = softmax_probability(model, image, label)
    for x in iterates:
        assert x.min() >= 0. and x.max() <= 1.
    assert softmax_probability(model, iterates[-1], label) < p0


def test_carlini_wagner_keeps_best_iterate():
    model = make_affine_model(8)
    image = make_image(9)
    iterates = []
    cfg = AttackConfig(eps=10., norm=NORM_L2, cw_steps=100, cw_search_steps=3, cw_initial_const=10.)
    result = carlini_wagner(model, image, cfg=cfg, callback=iterates.append)
    assert result.iterations == len(iterates) == 300
    for x in iterates:
        assert x.min() >= 0. and x.max() <= 1.
    assert result.success
    assert result.adv_label != result.clean_label
    # the returned perturbation is the smallest successful one
    assert_allclose(result.achieved_norm ** 2, result.info['best_l2'], rtol=1e-3, atol=1e-6)
    fooled = [float(np.sum(np.square(x - image, dtype=np.float64))) for x in iterates
              if predict(model, x)[1] != result.clean_label]
    assert result.info['best_l2'] <= min(fooled) + 1e-5


if __name__ == '__main__':
    test_deepfool_closed_form()
    test_contrast_severity_matches_scan()
