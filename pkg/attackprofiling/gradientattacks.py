"""
White-box attacks: FGSM, BIM/PGD, DeepFool, NewtonFool and Carlini-Wagner l2.

Each function takes a classifier exposing ``logits(Tensor N×3×H×W)`` and a
single float32 3×H×W image in [0, 1], and returns an AttackResult whose
perturbation lies in the ``cfg.eps`` ball of ``cfg.norm``.
"""
import logging

import numpy as np

from .attacktools import (AttackKind, AttackConfig, make_result, project_norm, loss_gradient,
                          logits_and_jacobian, NORM_INF)
from .errors import ContractError, ConfigurationError
from .layers import Adam
from .numerics import (Tensor, Tape, backward, tanh, reshape, softmax, getitem, amax, relu, tsum)
from .targets import predict

logger = logging.getLogger(__name__)


def _decider(model):
    return lambda x: predict(model, x)[1]


def _prepare(model, image, label, cfg):
    cfg = AttackConfig() if cfg is None else cfg
    cfg.validate()
    image = np.asarray(image, dtype=np.float32)
    _, clean_label = predict(model, image)
    if label is None:
        label = clean_label
    return image, clean_label, int(label), cfg


def fgsm(model, image, label=None, cfg=None):
    """
    One signed-gradient step: rho = eps * sign(dCE/dx).
    """
    image, clean_label, label, cfg = _prepare(model, image, label, cfg)
    grad, _ = loss_gradient(model, image, label)
    rho = (cfg.eps * np.sign(grad)).astype(np.float32)
    return make_result(AttackKind.FGSM, image, rho, cfg, clean_label, decide=_decider(model), iterations=1)


def iterative_gradient(model, image, label=None, cfg=None, random_start=False, rng=None, callback=None):
    """
    BIM (random_start=False) or PGD (random_start=True).

    The perturbation is ascended by step_size * sign(grad), projected on the
    l∞ ball, and gradients are taken at clip(clean + rho, 0, 1).

    Parameters
    ----------
    random_start: bool
        Start from a uniform draw inside the ball
    rng: np.random.Generator
        Source of the random start
    callback: callable or None
        Called with every image iterate
    """
    image, clean_label, label, cfg = _prepare(model, image, label, cfg)
    step = cfg.effective_step_size
    if random_start:
        rng = np.random.default_rng(cfg.seed) if rng is None else rng
        rho = rng.uniform(-cfg.eps, cfg.eps, size=image.shape).astype(np.float32)
    else:
        rho = np.zeros_like(image)
    x = np.clip(image + rho, 0., 1.)
    for _ in range(cfg.steps):
        grad, _ = loss_gradient(model, x, label)
        rho = project_norm((rho + step * np.sign(grad)).astype(np.float32), NORM_INF, cfg.eps)
        x = np.clip(image + rho, 0., 1.)
        if callback is not None:
            callback(x)
    kind = AttackKind.PGD if random_start else AttackKind.BIM
    return make_result(kind, image, rho, cfg.replace(norm=NORM_INF), clean_label, decide=_decider(model),
                       iterations=cfg.steps)


def deepfool_step(logits, jacobian, label):
    """
    Minimal l2 step to the closest linearised decision boundary.

    Parameters
    ----------
    logits: np.ndarray
        (K,) logits at the current point
    jacobian: np.ndarray
        (K, ...) gradient of every logit
    label: int
        Class to move away from

    Returns
    -------
    step: np.ndarray
        Same shape as one Jacobian row; zeros if no boundary is reachable
    """
    logits = np.asarray(logits, dtype=np.float64)
    jacobian = np.asarray(jacobian, dtype=np.float64)
    best, best_dist = None, np.inf
    for k in range(logits.shape[0]):
        if k == label:
            continue
        w = jacobian[k] - jacobian[label]
        wnorm = np.sqrt(np.sum(w * w))
        if wnorm == 0:
            continue
        f = logits[k] - logits[label]
        dist = abs(f) / wnorm
        if dist < best_dist:
            best_dist = dist
            best = (abs(f) / (wnorm * wnorm)) * w
    if best is None:
        return np.zeros(jacobian.shape[1:])
    return best


def deepfool_perturbation(model, image, label, max_steps=50, overshoot=0.02, callback=None):
    """
    Unconstrained DeepFool from ``image`` away from ``label``.

    Returns
    -------
    rho: np.ndarray
        (1 + overshoot) * accumulated step, float32
    iterations: int
    """
    r_tot = np.zeros(image.shape, dtype=np.float64)
    iterations = 0
    for _ in range(max_steps):
        x = np.clip(image + (1 + overshoot) * r_tot, 0., 1.).astype(np.float32)
        logits, jacobian = logits_and_jacobian(model, x)
        if int(np.argmax(logits)) != label:
            break
        r_tot += deepfool_step(logits, jacobian, label)
        iterations += 1
        if callback is not None:
            callback(np.clip(image + (1 + overshoot) * r_tot, 0., 1.).astype(np.float32))
    return ((1 + overshoot) * r_tot).astype(np.float32), iterations


def deepfool(model, image, cfg=None, label=None, callback=None):
    """
    Untargeted DeepFool, projected on the sampled ball after convergence.
    """
    image, clean_label, label, cfg = _prepare(model, image, label, cfg)
    rho, iterations = deepfool_perturbation(model, image, label, max_steps=cfg.deepfool_steps,
                                            overshoot=cfg.overshoot, callback=callback)
    return make_result(AttackKind.DEEPFOOL, image, rho, cfg, clean_label, decide=_decider(model),
                       iterations=iterations)


def _class_probability_gradient(model, x, label):
    xt = Tensor(x[None], requires_grad=True)
    with Tape() as tape:
        logits = model.logits(xt)
        prob = getitem(softmax(logits, axis=-1), (0, label))
    grad = backward(prob, tape, wrt=[xt])[xt][0]
    return prob.item(), grad, int(np.argmax(logits.data[0]))


def newtonfool(model, image, cfg=None, callback=None):
    """
    NewtonFool: drive down the predicted-class probability p with steps
    -delta * grad(p) / ||grad(p)||², delta = min(eta * ||x0|| * ||grad(p)||, p - 1/K).
    """
    cfg = AttackConfig() if cfg is None else cfg
    if cfg.newton_steps < 1:
        raise ContractError('newtonfool needs steps >= 1')
    if not 0. < cfg.newton_eta < 1.:
        raise ConfigurationError('newton_eta must be in (0, 1)')
    image, clean_label, label, cfg = _prepare(model, image, None, cfg)
    num_classes = model.num_classes
    x0_norm = float(np.sqrt(np.sum(np.square(image, dtype=np.float64))))
    x = image.copy()
    iterations = 0
    for _ in range(cfg.newton_steps):
        p, grad, current = _class_probability_gradient(model, x, label)
        if current != label:
            break
        gnorm2 = float(np.sum(np.square(grad, dtype=np.float64)))
        if gnorm2 == 0:
            break
        delta = min(cfg.newton_eta * x0_norm * np.sqrt(gnorm2), p - 1. / num_classes)
        if delta <= 0:
            break
        x = np.clip(x - (delta / gnorm2) * grad, 0., 1.).astype(np.float32)
        iterations += 1
        if callback is not None:
            callback(x)
    return make_result(AttackKind.NEWTONFOOL, image, x - image, cfg, clean_label, decide=_decider(model),
                       iterations=iterations)


def carlini_wagner(model, image, label=None, cfg=None, callback=None):
    """
    Carlini-Wagner l2 with the tanh change of variables.

    Minimises ||x - x0||² + c * max(Z_label - max_{j != label} Z_j + kappa, 0)
    with Adam, over ``cw_search_steps`` binary-search rounds on c. The best
    (smallest l2) successful iterate is kept; without success the last
    iterate is returned.
    """
    image, clean_label, label, cfg = _prepare(model, image, label, cfg)
    shape = (1,) + image.shape
    num_classes = model.num_classes
    mask = np.zeros(num_classes, dtype=np.float32)
    mask[label] = -1e4
    x0 = Tensor(image)
    w0 = np.arctanh((2 * image.astype(np.float64) - 1) * (1 - 1e-6)).astype(np.float32)

    best_x, best_l2, last_x = None, np.inf, image
    lower, upper, const = 0., 1e10, cfg.cw_initial_const
    iterations = 0
    for _ in range(cfg.cw_search_steps):
        w = Tensor(w0.copy(), requires_grad=True)
        opt = Adam([w], lr=cfg.cw_lr)
        succeeded = False
        for _ in range(cfg.cw_steps):
            with Tape() as tape:
                x = (tanh(w) + 1.) * 0.5
                delta = x - x0
                l2 = tsum(delta * delta)
                z = getitem(model.logits(reshape(x, shape)), 0)
                other = amax(z + mask)
                margin = relu(getitem(z, label) - other + cfg.cw_confidence)
                loss = l2 + margin * const
            x_np = x.data.copy()
            if int(np.argmax(z.data)) != label:
                succeeded = True
                if l2.item() < best_l2:
                    best_l2, best_x = l2.item(), x_np
            last_x = x_np
            if callback is not None:
                callback(x_np)
            grads = backward(loss, tape, wrt=[w])
            opt.step(grads)
            iterations += 1
        if succeeded:
            upper = min(upper, const)
            const = (lower + upper) / 2.
        else:
            lower = max(lower, const)
            const = const * 10. if upper >= 1e10 else (lower + upper) / 2.
        logger.debug('cw: const %.4g success %s best l2 %.5f', const, succeeded, best_l2)
    final = best_x if best_x is not None else last_x
    return make_result(AttackKind.CW, image, final - image, cfg, clean_label, decide=_decider(model),
                       iterations=iterations, info=dict(best_l2=float(best_l2)))
