"""
AID-mini generation: for every (attack, model) pair, sample clean images
from the matching benign partition, attack them with a per-record eps and
keep the results that still fool the model after 8-bit quantisation.

Each record slot owns the random stream [seed, attack, model_id, index]
(train slots use indices 0..n_train-1, test slots continue after them),
so the corpus does not depend on the number of workers.
"""
from pathlib import Path
import hashlib
import logging

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from .attacks import run_attack
from .attacktools import (AttackKind, AttackConfig, ATTACK_NAMES, EPS_K_RANGE, NORM_CODES,
                          family_of, norm_of, sample_eps, eps_from_k)
from .errors import ConfigurationError, AttackInitError
from .layers import config_hash
from .recordio import AidCorpus, Manifest, aid_dtype
from .shapeset import quantize
from .targets import predict, predict_batch
from .universalattacks import UniversalPerturbation, uap_build, uan_train

logger = logging.getLogger(__name__)

UNIVERSAL_KINDS = (AttackKind.UAN, AttackKind.UAP)


def _slot_rng(seed, attack, model_id, index):
    return np.random.default_rng([seed, int(attack), int(model_id), int(index)])


def slot_eps(seed, attack, model_id, index, image_shape):
    """The (eps, k) a record slot draws first from its stream."""
    return sample_eps(attack, _slot_rng(seed, attack, model_id, index), image_shape)


def correctly_classified(model, store, split):
    images, labels, ids = store.get_split(split)
    return ids[predict_batch(model, images) == labels]


def _universal_cache_name(kind, model_id, k):
    return '{}_model{}_k{:02d}.npz'.format(ATTACK_NAMES[kind], model_id, k)


def _build_universal(kind, model, images, cfg):
    if kind == AttackKind.UAP:
        return uap_build(model, images, cfg)
    return uan_train(model, images, cfg)


def build_universal_perturbations(models, store, needed, cfg=None, seed=0, cache_folder=None, n_jobs=1):
    """
    Build (or load from ``cache_folder``) one universal perturbation per
    needed (kind, model_id, k).

    The construction set of a model is a seeded draw of ``cfg.uap_images``
    train images it classifies correctly.

    Returns
    -------
    universal: dict
        (kind, model_id, k) -> UniversalPerturbation
    """
    cfg = AttackConfig() if cfg is None else cfg
    by_id = {m.model_id: m for m in models}
    universal = {}
    todo = []
    for kind, model_id, k in sorted(needed):
        path = None if cache_folder is None else Path(cache_folder) / _universal_cache_name(kind, model_id, k)
        if path is not None and path.exists():
            universal[(kind, model_id, k)] = UniversalPerturbation.load(path)
        else:
            todo.append((kind, model_id, k, path))

    construction = {}
    for model_id in sorted(set(t[1] for t in todo)):
        ids = correctly_classified(by_id[model_id], store, 'train')
        rng = np.random.default_rng([seed, model_id])
        ids = np.sort(rng.permutation(ids)[:cfg.uap_images])
        construction[model_id] = store.images_float(ids)

    def job_cfg(kind, model_id, k):
        shape = construction[model_id].shape[1:]
        eps = eps_from_k(k, norm_of(kind), int(np.prod(shape)))
        return cfg.replace(eps=float(eps), norm=norm_of(kind), seed=seed * 1000 + int(kind) * 100 + model_id * 20 + k)

    built = Parallel(n_jobs=n_jobs)(
        delayed(_build_universal)(kind, by_id[model_id], construction[model_id], job_cfg(kind, model_id, k))
        for kind, model_id, k, _ in todo)
    for (kind, model_id, k, path), pert in zip(todo, built):
        universal[(kind, model_id, k)] = pert
        if path is not None:
            pert.save(path)
        logger.info('%s model %d k=%d: fooling rate %.3f', ATTACK_NAMES[kind], model_id, k, pert.fooling_rate)
    return universal


def _generate_slot(kind, model, store, candidates, cfg, seed, index, universal, max_retries, keep_failures):
    rng = _slot_rng(seed, kind, model.model_id, index)
    eps, k = sample_eps(kind, rng, store.images.shape[1:])
    slot_cfg = cfg.replace(eps=eps)
    pert = universal.get((kind, model.model_id, k)) if kind in UNIVERSAL_KINDS else None
    last = None
    for attempt in range(max_retries):
        clean_id = int(rng.choice(candidates))
        image = store.images_float(clean_id)
        try:
            result = run_attack(kind, model, image, cfg=slot_cfg, universal=pert, rng=rng)
        except AttackInitError:
            continue
        pixels = quantize(result.adv_image)
        _, adv_label = predict(model, pixels.astype(np.float32) / 255.)
        success = result.success and adv_label != result.clean_label
        last = (clean_id, eps, success, result.clean_label, adv_label, pixels)
        if success:
            break
    if last is None or (not last[2] and not keep_failures):
        return None
    return last


def generate_aid(models, store, attacks=None, per_attack_train=200, per_attack_test=50, seed=0, cfg=None,
                 max_retries=10, keep_failures=False, universal=None, universal_folder=None,
                 n_jobs=1, verbose=False):
    """
    Generate the AID-mini train and test corpora.

    Parameters
    ----------
    models: list of ClassifierModel
        Trained victims, one per model_id
    store: BenignStore
        Split benign store; train records use train images only, test
        records test images only
    attacks: list of int
        Attack labels, all 13 by default
    per_attack_train, per_attack_test: int
        Records per (attack, model) and split
    seed: int
        Master seed
    cfg: AttackConfig
        Shared attack knobs; eps and norm are set per record
    max_retries: int
        Clean images tried per slot
    keep_failures: bool
        Store the last failed attempt instead of dropping the slot
    universal: dict or None
        Prebuilt (kind, model_id, k) -> UniversalPerturbation
    universal_folder: str or Path
        Cache folder for universal perturbations
    n_jobs: int
        joblib workers
    verbose: bool

    Returns
    -------
    train: AidCorpus
    test: AidCorpus
    manifest: Manifest
    shortfall: pd.DataFrame
        requested / obtained per (split, attack, model)
    """
    cfg = AttackConfig() if cfg is None else cfg
    attacks = list(range(len(ATTACK_NAMES))) if attacks is None else [int(a) for a in attacks]
    if per_attack_train < 1 or per_attack_test < 1:
        raise ConfigurationError('per-attack counts must be >= 1')
    image_shape = store.images.shape[1:]
    splits = (('train', 0, per_attack_train), ('test', per_attack_train, per_attack_test))

    candidates = {}
    for model in models:
        for split, _, _ in splits:
            ids = correctly_classified(model, store, split)
            if ids.size == 0:
                raise ConfigurationError('model {} classifies no {} image correctly'.format(model.model_id, split))
            candidates[(model.model_id, split)] = ids

    needed = set()
    for kind in attacks:
        if kind not in UNIVERSAL_KINDS:
            continue
        for model in models:
            for _, start, count in splits:
                for index in range(start, start + count):
                    needed.add((AttackKind(kind), model.model_id,
                                slot_eps(seed, kind, model.model_id, index, image_shape)[1]))
    universal = {} if universal is None else dict(universal)
    missing = set(n for n in needed if n not in universal)
    if missing:
        universal.update(build_universal_perturbations(models, store, missing, cfg=cfg, seed=seed,
                                                       cache_folder=universal_folder, n_jobs=n_jobs))

    slots = []
    for split, start, count in splits:
        for kind in attacks:
            for model in models:
                for index in range(start, start + count):
                    slots.append((split, AttackKind(kind), model, index))
    logger.info('generating %d record slots with %d job(s)', len(slots), n_jobs)
    outputs = Parallel(n_jobs=n_jobs, verbose=10 if verbose else 0)(
        delayed(_generate_slot)(kind, model, store, candidates[(model.model_id, split)], cfg, seed, index,
                                universal, max_retries, keep_failures)
        for split, kind, model, index in slots)

    dtype = aid_dtype(*image_shape[1:])
    rows = {'train': [], 'test': []}
    counts = {}
    for (split, kind, model, _), out in zip(slots, outputs):
        key = (split, int(kind), model.model_id)
        counts.setdefault(key, 0)
        if out is None:
            continue
        counts[key] += 1
        clean_id, eps, success, clean_label, adv_label, pixels = out
        rows[split].append((clean_id, int(kind), family_of(kind), model.model_id, NORM_CODES[norm_of(kind)],
                            eps, int(success), clean_label, adv_label, pixels))
    train = AidCorpus(np.array(rows['train'], dtype=dtype), name='train')
    test = AidCorpus(np.array(rows['test'], dtype=dtype), name='test')

    requested = dict(train=per_attack_train, test=per_attack_test)
    shortfall = pd.DataFrame([dict(split=s, attack=a, attack_name=ATTACK_NAMES[a], model=m, requested=requested[s],
                                   obtained=n) for (s, a, m), n in counts.items()],
                             columns=['split', 'attack', 'attack_name', 'model', 'requested', 'obtained'])
    missing_records = int((shortfall['requested'] - shortfall['obtained']).sum())
    if missing_records:
        logger.warning('corpus is short of %d records', missing_records)

    manifest = Manifest()
    manifest['format'] = 'AID1'
    manifest['master_seed'] = seed
    manifest['attacks'] = attacks
    manifest['models'] = [m.model_id for m in models]
    manifest['per_attack_train'] = per_attack_train
    manifest['per_attack_test'] = per_attack_test
    manifest['max_retries'] = max_retries
    manifest['keep_failures'] = keep_failures
    manifest['eps_k_range'] = {k: list(v) for k, v in EPS_K_RANGE.items()}
    manifest['attack_config'] = cfg.to_dict()
    manifest['split_checksum'] = split_checksum(store)
    manifest['train_clean_ids'] = sorted(set(int(i) for i in train.clean_ids))
    manifest['test_clean_ids'] = sorted(set(int(i) for i in test.clean_ids))
    for (s, a, m), n in sorted(counts.items()):
        manifest['count.{}.{}.{}'.format(s, ATTACK_NAMES[a], m)] = n
    manifest['train_checksum'] = train.checksum()
    manifest['test_checksum'] = test.checksum()
    manifest['config_hash'] = config_hash(dict(seed=seed, attacks=attacks, per_attack_train=per_attack_train,
                                               per_attack_test=per_attack_test, attack_config=cfg.to_dict(),
                                               split=manifest['split_checksum']))
    return train, test, manifest, shortfall


def split_checksum(store):
    h = hashlib.sha256()
    h.update(store.split.tobytes())
    h.update(store.labels.astype('<i8').tobytes())
    return h.hexdigest()[:16]


def regenerate_from_manifest(manifest, models, store, universal_folder=None, n_jobs=1):
    """
    Re-run generation with the parameters recorded in ``manifest``.
    """
    if manifest['split_checksum'] != split_checksum(store):
        raise ConfigurationError('benign split does not match the manifest')
    by_id = {m.model_id: m for m in models}
    models = [by_id[i] for i in manifest['models']]
    cfg = AttackConfig.from_dict(manifest['attack_config'])
    return generate_aid(models, store, attacks=manifest['attacks'], per_attack_train=manifest['per_attack_train'],
                        per_attack_test=manifest['per_attack_test'], seed=manifest['master_seed'], cfg=cfg,
                        max_retries=manifest['max_retries'], keep_failures=manifest['keep_failures'],
                        universal_folder=universal_folder, n_jobs=n_jobs)


def audit_corpus(train, test, models=None):
    """
    Check corpus-wide invariants.

    Returns
    -------
    audit: dict
        'family_consistent', 'disjoint_clean_ids' and, when models are given,
        'quantized_fooling_rate'
    """
    audit = dict(
        family_consistent=train.check_families() and test.check_families(),
        disjoint_clean_ids=len(set(train.clean_ids) & set(test.clean_ids)) == 0,
    )
    if models is not None:
        by_id = {m.model_id: m for m in models}
        fooled = []
        for corpus in (train, test):
            for model_id in np.unique(corpus.models):
                sub = corpus.filter(models=[model_id])
                labels = predict_batch(by_id[int(model_id)], sub.images_float())
                fooled.append(labels != sub.records['clean_label'])
        fooled = np.concatenate(fooled) if fooled else np.zeros(0, dtype=bool)
        audit['quantized_fooling_rate'] = float(fooled.mean()) if fooled.size else np.nan
    return audit
