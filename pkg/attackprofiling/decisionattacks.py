"""
Decision-based attacks. They only see a DecisionOracle, never gradients.
"""
import logging

import numpy as np
from scipy.ndimage import gaussian_filter

from .attacktools import AttackKind, AttackConfig, make_result, project_norm, NORM_L2
from .errors import AttackInitError, ConfigurationError

logger = logging.getLogger(__name__)

DISTORTIONS = {
    AttackKind.ADDITIVE_GAUSSIAN: 'gaussian',
    AttackKind.GAUSSIAN_BLUR: 'blur',
    AttackKind.SALT_PEPPER: 'salt_pepper',
    AttackKind.CONTRAST_REDUCTION: 'contrast',
}


def make_noise_state(distortion, shape, rng):
    """
    Per-sample randomness of a distortion, drawn once so severity is the only
    search variable.
    """
    if distortion == 'gaussian':
        return rng.standard_normal(shape).astype(np.float32)
    elif distortion == 'salt_pepper':
        return rng.uniform(size=(2,) + tuple(shape[1:])).astype(np.float32)
    return None


def apply_distortion(image, distortion, severity, noise_state=None, cfg=None):
    """
    Distort an image at severity s in [0, 1].

    * gaussian: x + sigma_max * s * noise
    * blur: Gaussian filter of spatial sigma blur_sigma_max * s
    * salt_pepper: pixels with u < s * max_fraction set to 0 or 1
    * contrast: (1 - s) * x + s * 0.5

    Returns the distorted image clipped to [0, 1].
    """
    cfg = AttackConfig() if cfg is None else cfg
    image = np.asarray(image, dtype=np.float32)
    if severity == 0:
        return image.copy()
    if distortion == 'gaussian':
        out = image + cfg.gaussian_sigma_max * severity * noise_state
    elif distortion == 'blur':
        sigma = cfg.blur_sigma_max * severity
        out = gaussian_filter(image, sigma=(0, sigma, sigma), mode='reflect')
    elif distortion == 'salt_pepper':
        flip = noise_state[0] < severity * cfg.salt_pepper_max
        salt = noise_state[1] < 0.5
        out = image.copy()
        out[:, flip & salt] = 1.
        out[:, flip & ~salt] = 0.
    elif distortion == 'contrast':
        out = (1. - severity) * image + severity * 0.5
    else:
        raise ConfigurationError('unknown distortion {}'.format(distortion))
    return np.clip(out, 0., 1.).astype(np.float32)


def severity_search(oracle, image, distortion, cfg=None, rng=None, noise_state=None):
    """
    Lowest severity whose norm-projected distortion changes the decision.

    The maximum severity is tested first; if it fools, ``cfg.severity_steps``
    bisection rounds shrink the bracket [lo, hi] where hi always fools.

    Parameters
    ----------
    oracle: DecisionOracle
    image: np.ndarray
        3×H×W in [0, 1]
    distortion: str or AttackKind
        One of 'gaussian', 'blur', 'salt_pepper', 'contrast'
    cfg: AttackConfig
    rng: np.random.Generator
        Draws the noise state when it is not given

    Returns
    -------
    result: AttackResult
        info holds 'severity' (hi) and 'severity_low' (lo)
    """
    cfg = AttackConfig() if cfg is None else cfg
    if not isinstance(distortion, str):
        kind = AttackKind(distortion)
        distortion = DISTORTIONS[kind]
    else:
        kind = {v: k for k, v in DISTORTIONS.items()}[distortion]
    image = np.asarray(image, dtype=np.float32)
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    if noise_state is None:
        noise_state = make_noise_state(distortion, image.shape, rng)
    clean_label = oracle(image)

    def candidate(s):
        rho = project_norm(apply_distortion(image, distortion, s, noise_state, cfg) - image, cfg.norm, cfg.eps)
        adv = np.clip(image + rho, 0., 1.)
        return rho, oracle(adv)

    rho_hi, label_hi = candidate(1.)
    if label_hi == clean_label:
        return make_result(kind, image, rho_hi, cfg, clean_label, adv_label=label_hi,
                           queries_used=oracle.queries, info=dict(severity=1., severity_low=1.))
    lo, hi = 0., 1.
    for _ in range(cfg.severity_steps):
        mid = 0.5 * (lo + hi)
        rho, label = candidate(mid)
        if label != clean_label:
            hi, rho_hi, label_hi = mid, rho, label
        else:
            lo = mid
    return make_result(kind, image, rho_hi, cfg, clean_label, adv_label=label_hi,
                       queries_used=oracle.queries, iterations=cfg.severity_steps,
                       info=dict(severity=hi, severity_low=lo))


def _orthogonal_step(direction, rng, scale):
    noise = rng.standard_normal(direction.shape)
    noise *= scale / max(np.linalg.norm(noise), 1e-12)
    dnorm2 = np.sum(direction * direction)
    noise -= (np.sum(noise * direction) / dnorm2) * direction
    return noise


def boundary_attack(oracle, image, cfg=None, rng=None, callback=None):
    """
    Decision-based Boundary Attack (l2).

    Starts from a random adversarial image pulled toward the clean image by
    bisection, then alternates an orthogonal (spherical) step and a step
    toward the clean image. Only candidates that stay adversarial and get
    strictly closer are accepted. Every 10 trials each step size is scaled
    by 1.5 when more than half of its trials succeeded and divided by 1.5
    otherwise. One query is kept back to verify the projected final image.

    Returns
    -------
    result: AttackResult
        info holds 'distances', the accepted-distance sequence
    """
    cfg = AttackConfig(norm=NORM_L2) if cfg is None else cfg
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    image = np.asarray(image, dtype=np.float32)
    clean = image.astype(np.float64)
    clean_label = oracle(image)

    start = None
    for _ in range(cfg.boundary_init_tries):
        if oracle.remaining is not None and oracle.remaining < 2:
            break
        noise = rng.uniform(0., 1., size=image.shape).astype(np.float32)
        if oracle(noise) != clean_label:
            start = noise.astype(np.float64)
            break
    if start is None:
        raise AttackInitError('no adversarial starting point after {} tries'.format(cfg.boundary_init_tries))

    lo, hi = 0., 1.
    for _ in range(10):
        if oracle.remaining is not None and oracle.remaining < 2:
            break
        mid = 0.5 * (lo + hi)
        if oracle(((1 - mid) * clean + mid * start).astype(np.float32)) != clean_label:
            hi = mid
        else:
            lo = mid
    x = (1 - hi) * clean + hi * start
    distances = [float(np.linalg.norm(x - clean))]

    spherical_step = cfg.boundary_spherical_step
    source_step = cfg.boundary_source_step
    spherical_hits, source_hits = [], []
    trials = 0
    while oracle.remaining is None or oracle.remaining >= 3:
        if oracle.remaining is None and trials >= cfg.max_queries:
            break
        trials += 1
        direction = x - clean
        d = np.linalg.norm(direction)
        if d == 0:
            break
        moved = direction + _orthogonal_step(direction, rng, spherical_step * d)
        spherical = clean + moved * (d / np.linalg.norm(moved))
        spherical = np.clip(spherical, 0., 1.)
        is_adv = oracle(spherical.astype(np.float32)) != clean_label
        spherical_hits.append(is_adv)
        if is_adv:
            toward = np.clip(spherical + source_step * (clean - spherical), 0., 1.)
            toward_adv = oracle(toward.astype(np.float32)) != clean_label
            source_hits.append(toward_adv)
            dist = np.linalg.norm(toward - clean)
            if toward_adv and dist < distances[-1]:
                x = toward
                distances.append(float(dist))
                if callback is not None:
                    callback(x.astype(np.float32))
        if trials % 10 == 0:
            spherical_step *= 1.5 if np.mean(spherical_hits[-10:]) > 0.5 else 1 / 1.5
            if source_hits:
                source_step *= 1.5 if np.mean(source_hits[-10:]) > 0.5 else 1 / 1.5
            source_step = min(source_step, 0.5)
    logger.debug('boundary: %d trials, distance %.4f -> %.4f', trials, distances[0], distances[-1])
    rho = (x - clean).astype(np.float32)
    result = make_result(AttackKind.BOUNDARY, image, rho, cfg, clean_label, decide=oracle,
                         iterations=trials, info=dict(distances=distances))
    result.queries_used = oracle.queries
    return result
