import numpy as np
import pytest
from numpy.testing import assert_array_equal, assert_allclose

from attackprofiling.errors import ConfigurationError, DimensionError
from attackprofiling.numerics import Tensor
from attackprofiling.glof import ExtractorConfig, SignatureExtractor
from attackprofiling.profiler import (FusionConfig, FusionModule, AttackClassifier, ProfilingPipeline, fuse,
                                      classify, predict_attack, pipeline_features, save_pipeline, load_pipeline)


def make_extractor(seed=0):
    return SignatureExtractor(ExtractorConfig(levels=1, token_width=16, grid_width=8, patch=4, heads=2,
                                              image_size=8, seed=seed))


def make_images(n=4, seed=0):
    return np.random.default_rng(seed).uniform(size=(n, 3, 8, 8)).astype(np.float32)


def test_fusion_channels():
    rng = np.random.default_rng(0)
    x = Tensor(make_images())
    fused = fuse(x, x, FusionModule(FusionConfig(channels=6), rng))
    assert fused.shape == (4, 12, 8, 8)
    alone = fuse(x, x, FusionModule(FusionConfig(channels=6, fusion=False), rng))
    assert alone.shape == (4, 6, 8, 8)
    with pytest.raises(DimensionError):
        fuse(x, Tensor(make_images(3)), FusionModule(FusionConfig(), rng))


def test_fusion_signature_first():
    rng = np.random.default_rng(1)
    module = FusionModule(FusionConfig(channels=5), rng)
    signature, image = Tensor(make_images(seed=1)), Tensor(make_images(seed=2))
    fused = fuse(signature, image, module).data
    assert_allclose(fused[:, :5], module.signature_branch(signature).data)
    assert_allclose(fused[:, 5:], module.input_branch(image).data)


def test_classify_probabilities():
    classifier = AttackClassifier(6, 13, np.random.default_rng(0))
    classifier.eval()
    probs, labels = classify(classifier, np.random.default_rng(1).standard_normal((5, 6, 8, 8)))
    assert probs.shape == (5, 13)
    assert_allclose(probs.sum(axis=1), np.ones(5), atol=1e-5)
    assert np.all(probs >= 0)
    assert_array_equal(labels, np.argmax(probs, axis=1))
    # 24 -> 60 -> 30 -> 66 -> 33 -> 69
    assert classifier.num_features == 69


def test_pipeline_variants():
    images = make_images()
    full = ProfilingPipeline(make_extractor(), FusionConfig(channels=4))
    assert full.use_extractor
    assert full.fusion.out_channels == 8
    probs, labels = predict_attack(full, images, batch_size=3)
    assert probs.shape == (4, 13)
    assert labels.shape == (4,)

    bare = ProfilingPipeline(None, FusionConfig(channels=4))
    assert not bare.use_extractor
    assert not bare.fusion_cfg.fusion
    assert_array_equal(bare.signature(Tensor(images)).data, images)
    assert predict_attack(bare, images)[0].shape == (4, 13)

    family = ProfilingPipeline(make_extractor(), task='family')
    assert family.arity == 3
    assert_array_equal(family.targets([0, 5, 6, 10, 11, 12]), [0, 0, 1, 1, 2, 2])
    assert_array_equal(full.targets([3, 9]), [3, 9])
    with pytest.raises(ConfigurationError):
        ProfilingPipeline(None, task='norm')


def test_frozen_parameters():
    pipeline = ProfilingPipeline(make_extractor(), freeze_extractor=True)
    extractor_params = set(id(p) for p in pipeline.extractor.parameters())
    trainable = pipeline.trainable_parameters()
    assert not any(id(p) in extractor_params for p in trainable)
    assert len(trainable) == len(pipeline.parameters()) - len(pipeline.extractor.parameters())
    unfrozen = ProfilingPipeline(make_extractor())
    assert len(unfrozen.trainable_parameters()) == len(unfrozen.parameters())


def test_features():
    pipeline = ProfilingPipeline(make_extractor())
    feats = pipeline_features(pipeline, make_images(5), batch_size=2)
    assert feats.shape == (5, pipeline.classifier.num_features)
    assert pipeline_features(pipeline, np.zeros((0, 3, 8, 8))).shape == (0, pipeline.classifier.num_features)


def test_save_load(tmp_path):
    images = make_images()
    for extractor in (make_extractor(2), None):
        pipeline = ProfilingPipeline(extractor, FusionConfig(channels=4), task='family', seed=3)
        path = tmp_path / 'pipeline.prc'
        save_pipeline(pipeline, path, config_hash='abcd', lineage={'corpus': 'c0ffee'})
        loaded = load_pipeline(path)
        assert loaded.task == 'family'
        assert loaded.use_extractor == (extractor is not None)
        assert loaded.config_hash == 'abcd'
        assert loaded.lineage == {'corpus': 'c0ffee'}
        assert_allclose(predict_attack(loaded, images)[0], predict_attack(pipeline, images)[0], atol=1e-6)


if __name__ == '__main__':
    test_pipeline_variants()
    test_frozen_parameters()
