import json

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_array_equal, assert_allclose

from attackprofiling.errors import ConfigurationError, ContractError, EvaluationError, LeakageError
from attackprofiling.attacktools import AttackKind, NORM_CODES, family_of, norm_of, eps_from_k
from attackprofiling.numerics import Tensor
from attackprofiling.glof import ExtractorConfig, SignatureExtractor
from attackprofiling.profiler import ProfilingPipeline
from attackprofiling.recordio import AidCorpus, Manifest, aid_dtype
from attackprofiling.shapeset import BenignStore, shapeset_generate
from attackprofiling.evaluationtools import psnr
from attackprofiling.trainpipe import (Stage1Config, Stage2Config, build_pipeline, split_holdout, stage1_train,
                                       stage2_train, evaluate, image_quality, signature_quality, cross_model_eval,
                                       export_features, eps_trend)

SIZE = 8


class LabelReader:
    """Pipeline stand-in reading the attack label from the first pixel."""
    task = 'attack'
    arity = 13
    targets = ProfilingPipeline.targets

    def logits(self, x):
        labels = np.rint(x.data[:, 0, 0, 0] * 255).astype(np.int64) % 13
        return Tensor(np.eye(13, dtype=np.float32)[labels] * 10.)


class ConstantGuess(LabelReader):
    def logits(self, x):
        return Tensor(np.zeros((x.shape[0], 13), dtype=np.float32))


def make_records(attacks, eps_k=None, clean_ids=None, models=None, seed=0):
    attacks = np.asarray(attacks)
    n = attacks.size
    rng = np.random.default_rng(seed)
    m = 3 * SIZE * SIZE
    eps_k = 1 + np.arange(n) % 10 if eps_k is None else np.asarray(eps_k)
    records = np.zeros(n, dtype=aid_dtype(SIZE, SIZE))
    records['clean_id'] = np.arange(n) if clean_ids is None else clean_ids
    records['attack'] = attacks
    records['family'] = [family_of(a) for a in attacks]
    records['model'] = np.arange(n) % 3 if models is None else models
    records['norm'] = [NORM_CODES[norm_of(a)] for a in attacks]
    records['eps'] = [eps_from_k(int(k), norm_of(a), m) for k, a in zip(eps_k, attacks)]
    records['success'] = 1
    records['pixels'] = rng.integers(0, 256, size=(n, 3, SIZE, SIZE))
    records['pixels'][:, 0, 0, 0] = attacks
    return records


def make_corpus(n=26, **kwargs):
    return AidCorpus(make_records(np.arange(n) % 13, **kwargs), name='toy')


def make_manifest(train_clean_ids=(10000,)):
    return Manifest({'train_clean_ids': [int(i) for i in train_clean_ids]})


def make_store_corpus(n_per_class=4, seed=0):
    """Benign store and a corpus of noisy copies of its images."""
    store = shapeset_generate(n_per_class, classes=3, size=SIZE, seed=seed)
    n = len(store)
    records = make_records(np.arange(n) % 13, clean_ids=np.arange(n), seed=seed)
    noise = np.random.default_rng(seed).integers(-20, 21, size=store.images.shape)
    records['pixels'] = np.clip(store.images.astype(np.int64) + noise, 0, 255)
    return store, AidCorpus(records, name='noisy')


def make_extractor(seed=0, variant='glof'):
    return SignatureExtractor(ExtractorConfig(levels=1, token_width=16, grid_width=8, patch=4, heads=2,
                                              image_size=SIZE, variant=variant, seed=seed))


def test_stage_configs():
    Stage1Config(iterations=0).validate()
    for bad in (dict(lr=0.), dict(batch_size=0), dict(holdout_fraction=1.)):
        with pytest.raises(ConfigurationError):
            Stage1Config(**bad).validate()
    for bad in (dict(task='model'), dict(variant='glof-x'), dict(use_extractor=False, freeze_extractor=True)):
        with pytest.raises(ConfigurationError):
            Stage2Config(**bad).validate()
    assert Stage2Config().iterations == 10000
    assert Stage1Config().iterations == 5000


def test_build_pipeline():
    extractor = make_extractor()
    pipeline = build_pipeline(Stage2Config(), extractor=extractor)
    assert pipeline.extractor is extractor
    assert pipeline.fusion_cfg.fusion

    fresh = build_pipeline(Stage2Config(skip_pretrain=True), extractor=extractor)
    assert fresh.extractor is not extractor
    assert fresh.extractor.cfg.token_width == 16

    bare = build_pipeline(Stage2Config(use_extractor=False, task='family'), extractor=extractor)
    assert bare.extractor is None
    assert not bare.fusion_cfg.fusion
    assert bare.arity == 3

    with pytest.raises(ConfigurationError):
        build_pipeline(Stage2Config(variant='glof-c'), extractor=extractor)
    assert build_pipeline(Stage2Config(variant='glof-c'), extractor=make_extractor(variant='glof-c'))


def test_split_holdout():
    train, hold = split_holdout(20, 0.1, seed=3)
    assert hold.size == 2 and train.size == 18
    assert_array_equal(np.sort(np.concatenate([train, hold])), np.arange(20))
    assert_array_equal(split_holdout(20, 0.1, seed=3)[1], hold)
    assert split_holdout(20, 0., seed=3)[1].size == 0
    assert split_holdout(3, 0.01, seed=0)[1].size == 1


def test_stage1_zero_iterations_keeps_extractor():
    store, corpus = make_store_corpus()
    extractor = make_extractor()
    before = {k: v.copy() for k, v in extractor.state_dict().items()}
    extractor, curve = stage1_train(extractor, corpus, store, Stage1Config(iterations=0))
    for k, v in extractor.state_dict().items():
        assert_array_equal(v, before[k], err_msg=k)
    assert len(curve) == 1
    assert np.isnan(curve['train_loss'].iloc[0])


def test_stage1_curve():
    store, corpus = make_store_corpus()
    extractor = make_extractor()
    before = {k: v.copy() for k, v in extractor.state_dict().items()}
    cfg = Stage1Config(iterations=5, eval_every=2, batch_size=4, holdout_fraction=0.25)
    extractor, curve = stage1_train(extractor, corpus, store, cfg)
    assert list(curve.columns) == ['iteration', 'train_loss', 'lr', 'heldout_mse', 'heldout_psnr', 'baseline_psnr']
    assert list(curve['iteration']) == [0, 2, 4, 5]
    assert np.all(np.isfinite(curve['train_loss'].iloc[1:]))
    assert curve['baseline_psnr'].nunique() == 1
    assert not extractor.training
    changed = [k for k, v in extractor.state_dict().items() if not np.array_equal(v, before[k])]
    assert changed

    with pytest.raises(ContractError):
        stage1_train(make_extractor(), corpus, BenignStore(store.images[:2], store.labels[:2]), cfg)


def test_stage2_frozen_extractor():
    _, corpus = make_store_corpus()
    cfg = Stage2Config(iterations=3, eval_every=1, batch_size=4, freeze_extractor=True, holdout_fraction=0.25)
    pipeline = build_pipeline(cfg, extractor=make_extractor())
    extractor_before = {k: v.copy() for k, v in pipeline.extractor.state_dict().items()}
    head_before = {k: v.copy() for k, v in pipeline.classifier.state_dict().items()}
    pipeline, curve = stage2_train(pipeline, corpus, cfg)
    for k, v in pipeline.extractor.state_dict().items():
        assert_array_equal(v, extractor_before[k], err_msg=k)
    assert any(not np.array_equal(v, head_before[k]) for k, v in pipeline.classifier.state_dict().items())
    assert list(curve.columns) == ['iteration', 'train_loss', 'lr', 'train_accuracy', 'heldout_accuracy']
    assert list(curve['iteration']) == [0, 1, 2, 3]
    assert curve['train_accuracy'].iloc[1:].between(0, 1).all()

    with pytest.raises(ContractError):
        stage2_train(pipeline, corpus, cfg.replace(task='family'))


def test_evaluate_perfect_and_constant():
    corpus = make_corpus()
    report = evaluate(LabelReader(), corpus, manifest=make_manifest())
    assert report.accuracy == 1.
    assert_array_equal(report.confusion.values, 2 * np.eye(13))
    assert report.num_records == 26
    assert report.family_accuracy == 1.

    report = evaluate(ConstantGuess(), corpus, manifest=make_manifest())
    assert_allclose(report.accuracy, 1 / 13.)
    assert report.per_class['accuracy'].iloc[0] == 1.
    assert report.per_class['accuracy'].iloc[1:].sum() == 0.
    assert_allclose(report.family_accuracy, 12 / 26.)


def test_evaluate_family_on_attack_pipeline():
    report = evaluate(ConstantGuess(), make_corpus(), task='family', manifest=make_manifest())
    assert report.task == 'family'
    assert report.confusion.shape == (3, 3)
    assert_allclose(report.accuracy, 12 / 26.)
    assert_array_equal(report.family_collapse().values, report.confusion.values)


def test_evaluate_filters_and_errors():
    corpus = make_corpus()
    report = evaluate(LabelReader(), corpus, attacks=[AttackKind.FGSM, AttackKind.BOUNDARY], models=[0, 1, 2],
                      manifest=make_manifest())
    assert report.num_records == 4
    assert report.filters['attacks'] == [2, 10]
    with pytest.raises(EvaluationError):
        evaluate(LabelReader(), corpus, attacks=[0], models=[2], manifest=make_manifest())
    with pytest.raises(LeakageError):
        evaluate(LabelReader(), corpus, train_corpus=make_corpus(n=3))
    with pytest.raises(LeakageError):
        evaluate(LabelReader(), corpus, manifest=Manifest({'train_clean_ids': [5, 500]}))
    evaluate(LabelReader(), corpus, train_corpus=make_corpus(n=3, clean_ids=[100, 101, 102]),
             manifest=Manifest({'train_clean_ids': [500]}))
    with pytest.raises(ContractError):
        family_reader = LabelReader()
        family_reader.task = 'family'
        evaluate(family_reader, corpus, task='attack', manifest=make_manifest())


def test_evaluation_rejects_shared_clean_images():
    corpus = make_corpus()
    with pytest.raises(ContractError):
        evaluate(LabelReader(), corpus)
    # the same split used for training and evaluation
    with pytest.raises(LeakageError):
        evaluate(LabelReader(), corpus, train_corpus=corpus)
    with pytest.raises(LeakageError):
        evaluate(LabelReader(), corpus, manifest=make_manifest(corpus.clean_ids[:1]))
    assert issubclass(LeakageError, EvaluationError)

    k = np.tile(np.arange(1, 9), 2)
    fgsm = AidCorpus(make_records(np.full(k.size, AttackKind.FGSM), eps_k=k))
    with pytest.raises(ContractError):
        eps_trend(LabelReader(), fgsm)
    # a leak must not turn into empty buckets
    with pytest.raises(LeakageError):
        eps_trend(LabelReader(), fgsm, train_corpus=fgsm)

    seen = []

    def factory(subset):
        seen.append(len(subset))
        return LabelReader()

    train = make_corpus(n=39)
    with pytest.raises(LeakageError):
        cross_model_eval(factory, train, train)
    with pytest.raises(LeakageError):
        cross_model_eval(factory, train, make_corpus(n=39, clean_ids=np.arange(39) + 1000),
                         manifest=make_manifest([1000]))
    assert seen == []


def test_report_save(tmp_path):
    report = evaluate(LabelReader(), make_corpus(), manifest=make_manifest())
    report.save(tmp_path / 'reports', prefix='test')
    with open(tmp_path / 'reports' / 'test_summary.json') as f:
        summary = json.load(f)
    assert summary['accuracy'] == 1.
    assert summary['num_records'] == 26
    per_class = pd.read_csv(tmp_path / 'reports' / 'test_per_class.csv', sep='\t')
    assert len(per_class) == 13
    assert list(per_class['support']) == [2] * 13
    confusion = pd.read_csv(tmp_path / 'reports' / 'test_confusion.csv', sep='\t', index_col=0)
    assert confusion.shape == (13, 13)


def test_eps_trend():
    k = np.tile(np.arange(1, 9), 2)
    corpus = AidCorpus(make_records(np.full(k.size, AttackKind.FGSM), eps_k=k))
    trend = eps_trend(LabelReader(), corpus, manifest=make_manifest())
    assert list(trend['num_records']) == [8, 8, 0, 0]
    assert list(trend['accuracy'].iloc[:2]) == [1., 1.]
    assert trend['accuracy'].iloc[2:].isna().all()
    assert set(trend['attack_name']) == {'FGSM'}


def test_cross_model_grid():
    train, test = make_corpus(n=39), make_corpus(n=39, clean_ids=np.arange(39) + 1000)
    seen = []

    def factory(subset):
        seen.append(sorted(set(subset.models)))
        return LabelReader()

    grid = cross_model_eval(factory, train, test)
    assert seen == [[0], [1], [2]]
    assert list(grid.index) == ['MiniRes', 'MiniDense', 'MiniIncep']
    assert grid.index.name == 'trained_on'
    assert grid.columns.name == 'tested_on'
    assert_array_equal(grid.values, np.ones((3, 3)))

    with pytest.raises(ConfigurationError):
        cross_model_eval(factory, train, test.filter(models=[0, 1]))


def test_export_features(tmp_path):
    _, corpus = make_store_corpus()
    pipeline = build_pipeline(Stage2Config(), extractor=make_extractor())
    path = tmp_path / 'features.tsv'
    df = export_features(pipeline, corpus, path)
    assert len(df) == len(corpus)
    assert list(df.columns[:3]) == ['record_id', 'attack', 'family']
    assert df.shape[1] == 3 + pipeline.classifier.num_features
    loaded = pd.read_csv(path, sep='\t')
    assert_array_equal(loaded['attack'], corpus.attacks)


def test_image_quality():
    image = np.random.default_rng(0).uniform(size=(2, 3, SIZE, SIZE)).astype(np.float32)
    assert image_quality(image[0], image[0]) == (100., pytest.approx(1.))
    p, s = image_quality(image, image[::-1])
    assert_allclose(p, np.mean([psnr(image[0], image[1]), psnr(image[1], image[0])]), rtol=1e-6)
    assert -1 <= s <= 1
    with pytest.raises(EvaluationError):
        image_quality(image[:0], image[:0])


def test_signature_quality():
    store, corpus = make_store_corpus()
    report = signature_quality(make_extractor(), corpus, store)
    assert report.num_pairs == len(corpus)
    assert report.variant == 'glof'
    baseline = image_quality(corpus.images_float(), store.images_float(corpus.clean_ids))
    assert_allclose([report.baseline_psnr, report.baseline_ssim], baseline)
    assert np.isfinite(report.psnr_gain)
    assert set(report.to_dict()) == {'variant', 'psnr', 'ssim', 'baseline_psnr', 'baseline_ssim', 'num_pairs'}


if __name__ == '__main__':
    test_evaluate_perfect_and_constant()
    test_stage1_curve()
