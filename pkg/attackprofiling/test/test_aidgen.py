import numpy as np
import pytest
from numpy.testing import assert_array_equal

from attackprofiling.errors import ConfigurationError
from attackprofiling.attacktools import AttackKind, AttackConfig
from attackprofiling.shapeset import BenignStore, split_benign
from attackprofiling.targets import ArchitectureSpec, build_target, predict_batch
from attackprofiling.aidgen import (generate_aid, regenerate_from_manifest, audit_corpus, slot_eps,
                                    correctly_classified)

ATTACKS = [AttackKind.FGSM, AttackKind.SALT_PEPPER]


def make_setup(seed=0):
    """A tiny model and a store labelled by that model, so every image is correctly classified."""
    model = build_target(ArchitectureSpec(depth=2, width=8, num_classes=4), seed=seed, model_id=0)
    rng = np.random.default_rng(seed)
    images = rng.integers(0, 256, size=(40, 3, 8, 8), dtype=np.uint8)
    labels = predict_batch(model, images)
    # every label needs two images for a stratified split
    labels[:8] = np.repeat(np.arange(4), 2)
    store = split_benign(BenignStore(images, labels), seed=seed)
    return model, store


def make_cfg():
    return AttackConfig(max_queries=50, severity_steps=4)


def test_generate_is_deterministic():
    model, store = make_setup()
    kargs = dict(attacks=ATTACKS, per_attack_train=3, per_attack_test=2, seed=5, cfg=make_cfg(),
                 keep_failures=True)
    train, test, manifest, shortfall = generate_aid([model], store, n_jobs=1, **kargs)
    assert len(train) == 6 and len(test) == 4
    assert shortfall['obtained'].sum() == 10

    train2, test2, manifest2, _ = generate_aid([model], store, n_jobs=2, **kargs)
    assert train2.checksum() == train.checksum()
    assert test2.checksum() == test.checksum()
    assert manifest2 == manifest

    train3, test3, _, _ = regenerate_from_manifest(manifest, [model], store)
    assert train3.checksum() == manifest['train_checksum']
    assert test3.checksum() == manifest['test_checksum']


def test_generate_respects_splits_and_families():
    model, store = make_setup(1)
    train, test, manifest, _ = generate_aid([model], store, attacks=ATTACKS, per_attack_train=4,
                                            per_attack_test=3, cfg=make_cfg(), keep_failures=True)
    train_ids = set(store.split_ids('train').tolist())
    test_ids = set(store.split_ids('test').tolist())
    assert set(train.clean_ids.tolist()) <= train_ids
    assert set(test.clean_ids.tolist()) <= test_ids
    audit = audit_corpus(train, test, models=[model])
    assert audit['family_consistent']
    assert audit['disjoint_clean_ids']
    # eps of record i is the first draw of its slot stream
    first = train.filter(attacks=[AttackKind.FGSM])
    eps, _ = slot_eps(0, AttackKind.FGSM, 0, 0, (3, 8, 8))
    assert np.isclose(first.records['eps'][0], eps)
    # stored successes still fool after quantisation
    fooled = train.filter(success=True)
    if len(fooled):
        assert np.all(predict_batch(model, fooled.images_float()) != fooled.records['clean_label'])


def test_generate_errors():
    model, store = make_setup()
    with pytest.raises(ConfigurationError):
        generate_aid([model], store, attacks=ATTACKS, per_attack_train=0)
    _, _, manifest, _ = generate_aid([model], store, attacks=[AttackKind.FGSM], per_attack_train=1,
                                     per_attack_test=1, keep_failures=True)
    moved = split_benign(store, seed=99)
    if not np.array_equal(moved.split, store.split):
        with pytest.raises(ConfigurationError):
            regenerate_from_manifest(manifest, [model], moved)


def test_correctly_classified():
    model, store = make_setup()
    ids = correctly_classified(model, store, 'train')
    assert set(ids.tolist()) <= set(store.split_ids('train').tolist())
    assert ids.size > 0


if __name__ == '__main__':
    test_generate_is_deterministic()
