"""
Single entry point over the 13 attacks.
"""
import logging

import numpy as np

from .attacktools import AttackKind, AttackConfig, make_result, norm_of, ATTACK_NAMES
from .decisionattacks import severity_search, boundary_attack, DISTORTIONS
from .errors import ConfigurationError, ContractError
from .gradientattacks import fgsm, iterative_gradient, deepfool, newtonfool, carlini_wagner
from .targets import DecisionOracle, predict, check_pixel_range
from .universalattacks import UniversalPerturbation

logger = logging.getLogger(__name__)


def as_kind(kind):
    if isinstance(kind, str):
        try:
            return AttackKind(ATTACK_NAMES.index(kind))
        except ValueError:
            raise ContractError('unknown attack {}'.format(kind))
    try:
        return AttackKind(int(kind))
    except ValueError:
        raise ContractError('unknown attack label {}'.format(kind))


def run_attack(kind, model, image, label=None, cfg=None, universal=None, rng=None, callback=None):
    """
    Run one attack and enforce the result invariants.

    Parameters
    ----------
    kind: AttackKind, int or name
    model: ClassifierModel
        Decision-based kinds only receive a DecisionOracle over it with
        budget ``cfg.max_queries``
    image: np.ndarray
        3×H×W in [0, 1]
    label: int or None
        Loss label of gradient attacks; defaults to the clean prediction
    cfg: AttackConfig
        ``eps`` is used as is, ``norm`` is replaced by the kind's norm
    universal: UniversalPerturbation or np.ndarray
        Prebuilt perturbation for UAN / UAP, applied additively
    rng: np.random.Generator
        Sample stream (random start, noise states, boundary walk)
    callback: callable
        Per-iterate hook of iterative attacks

    Returns
    -------
    result: AttackResult
        success re-verified with ``predict`` on the final image
    """
    kind = as_kind(kind)
    cfg = AttackConfig() if cfg is None else cfg
    cfg = cfg.replace(norm=norm_of(kind)).validate()
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    image = np.asarray(image, dtype=np.float32)
    check_pixel_range(image)
    _, clean_label = predict(model, image)

    if kind == AttackKind.FGSM:
        result = fgsm(model, image, label, cfg)
    elif kind in (AttackKind.PGD, AttackKind.BIM):
        result = iterative_gradient(model, image, label, cfg, random_start=kind == AttackKind.PGD,
                                    rng=rng, callback=callback)
    elif kind == AttackKind.DEEPFOOL:
        result = deepfool(model, image, cfg, label=label, callback=callback)
    elif kind == AttackKind.NEWTONFOOL:
        result = newtonfool(model, image, cfg, callback=callback)
    elif kind == AttackKind.CW:
        result = carlini_wagner(model, image, label, cfg, callback=callback)
    elif kind in DISTORTIONS:
        result = severity_search(DecisionOracle(model, cfg.max_queries), image, kind, cfg, rng=rng)
    elif kind == AttackKind.BOUNDARY:
        result = boundary_attack(DecisionOracle(model, cfg.max_queries), image, cfg, rng=rng, callback=callback)
    else:
        if universal is None:
            raise ConfigurationError('{} needs a prebuilt universal perturbation'.format(ATTACK_NAMES[kind]))
        rho = universal.rho if isinstance(universal, UniversalPerturbation) else np.asarray(universal, np.float32)
        result = make_result(kind, image, rho, cfg, clean_label, decide=lambda x: predict(model, x)[1])

    assert np.array_equal(result.adv_image, np.clip(image + result.perturbation, 0., 1.))
    assert result.achieved_norm <= cfg.eps + 1e-5
    _, adv_label = predict(model, result.adv_image)
    result.clean_label = clean_label
    result.adv_label = adv_label
    result.success = adv_label != clean_label
    logger.debug('%r', result)
    return result
