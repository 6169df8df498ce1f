"""
High level tools to build AID-mini, train the profiling pipeline and
collect its evaluation tables in one place.

The whole mechanism is based on a "study_folder" with several subfolders:
  * benign : the split benign store (npz)
  * targets : trained victim classifiers
  * aid : train / test corpora, manifest and the universal perturbation cache
  * extractor : signature extractors (one per name)
  * profiler : profiling pipelines (one per name)
  * tables : curves, statistics, grids and sweeps (tab separated csv)
  * reports : evaluation reports
  * inspect : image dumps of single records

Every artifact gets a ``<file>.config.json`` sidecar holding its resolved
configuration, its lineage and its config hash.
"""
from dataclasses import dataclass
from pathlib import Path
import json
import logging

import numpy as np
import pandas as pd
from PIL import Image

from .aidgen import generate_aid, audit_corpus
from .attacktools import AttackConfig, AttackKind
from .configtools import ConfigMixin, write_sidecar, read_sidecar
from .errors import ConfigurationError, EvaluationError
from .glof import ExtractorConfig, SignatureExtractor, save_extractor, load_extractor, extract_signature
from .profiler import FusionConfig, save_pipeline, load_pipeline
from .recordio import AidCorpus, Manifest
from .shapeset import BenignStore, shapeset_generate, split_benign, read_external_corpus
from .targets import (ArchitectureSpec, TrainConfig, MODEL_FAMILIES, build_target, train_target,
                      save_target, load_target)
from .trainpipe import (Stage1Config, Stage2Config, build_pipeline, stage1_train, stage2_train, evaluate,
                        signature_quality, cross_model_eval, export_features, eps_trend)

logger = logging.getLogger(__name__)

_subfolders = ('benign', 'targets', 'aid', 'aid/universal', 'extractor', 'profiler', 'tables', 'reports', 'inspect')

ABLATIONS = ('full', 'no-pretrain', 'glof-c', 'glof-a', 'no-fusion', 'no-extractor')
SWEEP_PARAMS = ('levels', 'heads')


@dataclass
class DatasetConfig(ConfigMixin):
    n_per_class: int = 100
    classes: int = 10
    size: int = 32
    train_fraction: float = 0.8
    external: str = None
    seed: int = 0


@dataclass
class GenerationConfig(ConfigMixin):
    per_attack_train: int = 200
    per_attack_test: int = 50
    max_retries: int = 10
    keep_failures: bool = False
    seed: int = 0


def make_benign_store(cfg):
    """ShapeSet (or an external corpus when ``cfg.external`` is set), split."""
    if cfg.external:
        store = read_external_corpus(cfg.external, size=cfg.size)
    else:
        store = shapeset_generate(cfg.n_per_class, classes=cfg.classes, size=cfg.size, seed=cfg.seed)
    return split_benign(store, train_fraction=cfg.train_fraction, seed=cfg.seed)


def setup_aid_study(study_folder, store, config=None):
    """
    Create the study folder and write the benign store into it.

    Parameters
    ----------
    study_folder: str or Path
    store: BenignStore
        Split benign store
    config: dict or None
        Resolved dataset configuration, kept in the store sidecar
    """
    study_folder = Path(study_folder)
    if (study_folder / 'benign' / 'benign.npz').exists():
        raise ConfigurationError('{} already holds a benign store'.format(study_folder))
    for name in _subfolders:
        (study_folder / name).mkdir(parents=True, exist_ok=True)
    path = study_folder / 'benign' / 'benign.npz'
    store.save(path)
    write_sidecar(path, dict(provenance=store.provenance, num_images=len(store),
                             class_counts=store.class_counts().tolist(), dataset=config or {}))


def _write_table(df, path, index=False):
    df.to_csv(path, sep='\t', index=index)
    logger.info('wrote %s', path)


def normalize_for_display(image):
    """Affine map of an array to [0, 1]; a constant array maps to 0.5."""
    image = np.asarray(image, dtype=np.float64)
    low, high = image.min(), image.max()
    if high - low < 1e-12:
        return np.full_like(image, 0.5)
    return (image - low) / (high - low)


def write_ppm(path, image):
    """Write a 3×H×W image in [0, 1] as a binary portable pixmap."""
    pixels = np.round(np.clip(np.asarray(image), 0., 1.) * 255).astype(np.uint8)
    Image.fromarray(np.ascontiguousarray(pixels.transpose(1, 2, 0)), mode='RGB').save(path, format='PPM')


class AidStudy:
    def __init__(self, study_folder=None):
        self.study_folder = Path(study_folder)
        if not (self.study_folder / 'benign' / 'benign.npz').exists():
            raise ConfigurationError('{} is not a study folder (run the dataset step first)'.format(study_folder))
        self.target_names = None
        self.has_corpus = None
        self.extractor_names = None
        self.profiler_names = None
        self.scan_folder()

    def __repr__(self):
        t = 'AID study\n'
        t += '  ' + str(self.study_folder) + '\n'
        t += '  targets: {} {}\n'.format(len(self.target_names), self.target_names)
        t += '  corpus: {}\n'.format(self.has_corpus)
        if len(self.extractor_names):
            t += '  extractors: {}\n'.format(self.extractor_names)
        if len(self.profiler_names):
            t += '  profilers: {}\n'.format(self.profiler_names)
        return t

    def scan_folder(self):
        f = self.study_folder
        self.target_names = sorted(p.stem for p in (f / 'targets').glob('*.prm'))
        self.has_corpus = (f / 'aid' / 'manifest.txt').exists()
        self.extractor_names = sorted(p.stem for p in (f / 'extractor').glob('*.glf'))
        self.profiler_names = sorted(p.stem for p in (f / 'profiler').glob('*.prc'))

    @classmethod
    def create(cls, study_folder, store, config=None):
        setup_aid_study(study_folder, store, config=config)
        return cls(study_folder)

    # artifacts
    def get_store(self):
        return BenignStore.load(self.study_folder / 'benign' / 'benign.npz')

    def get_targets(self):
        if not self.target_names:
            raise ConfigurationError('no trained target in {}'.format(self.study_folder / 'targets'))
        models = [load_target(self.study_folder / 'targets' / (name + '.prm')) for name in self.target_names]
        return sorted(models, key=lambda m: m.model_id)

    def get_manifest(self):
        path = self.study_folder / 'aid' / 'manifest.txt'
        if not path.exists():
            raise ConfigurationError('no corpus generated in {}'.format(self.study_folder))
        return Manifest.read(path)

    def get_corpus(self, split='train'):
        if split not in ('train', 'test'):
            raise ConfigurationError('split must be train or test')
        path = self.study_folder / 'aid' / (split + '.aid')
        if not path.exists():
            raise ConfigurationError('no corpus generated in {}'.format(self.study_folder))
        return AidCorpus.load(path)

    def extractor_path(self, name='glof'):
        return self.study_folder / 'extractor' / (name + '.glf')

    def profiler_path(self, name='profiler'):
        return self.study_folder / 'profiler' / (name + '.prc')

    def get_extractor(self, name='glof'):
        path = self.extractor_path(name)
        if not path.exists():
            raise ConfigurationError('no extractor named {}'.format(name))
        return load_extractor(path)

    def get_pipeline(self, name='profiler'):
        path = self.profiler_path(name)
        if not path.exists():
            raise ConfigurationError('no profiler named {}'.format(name))
        return load_pipeline(path)

    # pipeline steps
    def train_targets(self, families=MODEL_FAMILIES, arch=None, train_cfg=None, seed=0, verbose=False):
        """
        Train one victim per family; writes targets/<family>.prm and the
        training history tables.
        """
        store = self.get_store()
        arch = ArchitectureSpec(num_classes=store.num_classes) if arch is None else arch
        train_cfg = TrainConfig(seed=seed) if train_cfg is None else train_cfg
        histories = {}
        for family in families:
            spec = arch.replace(family=family)
            model = build_target(spec, seed=seed + MODEL_FAMILIES.index(family))
            model, history = train_target(model, store, train_cfg, verbose=verbose)
            path = self.study_folder / 'targets' / (family + '.prm')
            h = write_sidecar(path, dict(architecture=spec.to_dict(), train=train_cfg.to_dict(), seed=seed))
            save_target(model, path, config_hash=h)
            _write_table(history, self.study_folder / 'tables' / 'target_{}_history.csv'.format(family))
            histories[family] = history
        self.scan_folder()
        return histories

    def generate(self, attack_cfg=None, per_attack_train=200, per_attack_test=50, seed=0, max_retries=10,
                 keep_failures=False, n_jobs=1, verbose=False):
        """
        Generate AID-mini; writes aid/train.aid, aid/test.aid, aid/manifest.txt
        and the shortfall / statistics tables.
        """
        attack_cfg = AttackConfig() if attack_cfg is None else attack_cfg
        models = self.get_targets()
        store = self.get_store()
        train, test, manifest, shortfall = generate_aid(
            models, store, per_attack_train=per_attack_train, per_attack_test=per_attack_test, seed=seed,
            cfg=attack_cfg, max_retries=max_retries, keep_failures=keep_failures,
            universal_folder=self.study_folder / 'aid' / 'universal', n_jobs=n_jobs, verbose=verbose)
        aid = self.study_folder / 'aid'
        train.save(aid / 'train.aid')
        test.save(aid / 'test.aid')
        manifest.write(aid / 'manifest.txt')
        write_sidecar(aid / 'manifest.txt', dict(attack=attack_cfg.to_dict(), seed=seed,
                                                 per_attack_train=per_attack_train, per_attack_test=per_attack_test,
                                                 config_hash=manifest['config_hash']))
        _write_table(shortfall, self.study_folder / 'tables' / 'aid_shortfall.csv')
        audit = audit_corpus(train, test, models)
        with open(self.study_folder / 'tables' / 'aid_audit.json', 'w', encoding='utf8') as f:
            json.dump(audit, f, indent=4, sort_keys=True)
        self.stats()
        self.scan_folder()
        return train, test, manifest

    def stats(self):
        """Per (attack, model) counts, success rate and mean eps of both splits."""
        tables = []
        for split in ('train', 'test'):
            summary = self.get_corpus(split).summary()
            summary.insert(0, 'split', split)
            tables.append(summary)
        stats = pd.concat(tables, ignore_index=True)
        _write_table(stats, self.study_folder / 'tables' / 'aid_summary.csv')
        return stats

    def train_extractor(self, extractor_cfg=None, stage1_cfg=None, name='glof', verbose=False):
        extractor_cfg = ExtractorConfig() if extractor_cfg is None else extractor_cfg
        stage1_cfg = Stage1Config() if stage1_cfg is None else stage1_cfg
        manifest = self.get_manifest()
        extractor = SignatureExtractor(extractor_cfg)
        extractor, curve = stage1_train(extractor, self.get_corpus('train'), self.get_store(), stage1_cfg,
                                        verbose=verbose)
        path = self.extractor_path(name)
        h = write_sidecar(path, dict(extractor=extractor_cfg.to_dict(), stage1=stage1_cfg.to_dict(),
                                     lineage=dict(corpus=manifest['config_hash'])))
        save_extractor(extractor, path, config_hash=h)
        extractor.config_hash = h
        _write_table(curve, self.study_folder / 'tables' / 'stage1_{}.csv'.format(name))
        self.scan_folder()
        return extractor, curve

    def train_profiler(self, stage2_cfg=None, name='profiler', extractor_name='glof', extractor_cfg=None,
                       fusion_cfg=None, verbose=False):
        """
        Stage-2 training. The pre-trained extractor ``extractor_name`` is used
        unless the configuration skips pre-training or the extractor.
        """
        stage2_cfg = Stage2Config() if stage2_cfg is None else stage2_cfg
        fusion_cfg = FusionConfig() if fusion_cfg is None else fusion_cfg
        manifest = self.get_manifest()
        extractor = None
        lineage = dict(corpus=manifest['config_hash'])
        if stage2_cfg.use_extractor and not stage2_cfg.skip_pretrain:
            extractor = self.get_extractor(extractor_name)
            lineage['extractor_name'] = extractor_name
            lineage['extractor'] = extractor.config_hash
        pipeline = build_pipeline(stage2_cfg, extractor, extractor_cfg=extractor_cfg, fusion_cfg=fusion_cfg)
        pipeline, curve = stage2_train(pipeline, self.get_corpus('train'), stage2_cfg, verbose=verbose)
        path = self.profiler_path(name)
        h = write_sidecar(path, dict(stage2=stage2_cfg.to_dict(), fusion=fusion_cfg.to_dict(), lineage=lineage))
        save_pipeline(pipeline, path, config_hash=h, lineage=lineage)
        pipeline.lineage = lineage
        pipeline.config_hash = h
        _write_table(curve, self.study_folder / 'tables' / 'stage2_{}.csv'.format(name))
        self.scan_folder()
        return pipeline, curve

    def check_lineage(self, pipeline):
        """
        Refuse a pipeline trained on another corpus, or whose pre-trained
        extractor has since been replaced.
        """
        manifest = self.get_manifest()
        lineage = getattr(pipeline, 'lineage', {}) or {}
        if lineage.get('corpus') != manifest['config_hash']:
            raise EvaluationError('profiler was trained on corpus {} but the study corpus is {}'.format(
                lineage.get('corpus'), manifest['config_hash']))
        name = lineage.get('extractor_name')
        if name is not None:
            sidecar = read_sidecar(self.extractor_path(name))
            current = None if sidecar is None else sidecar['config_hash']
            if current != lineage.get('extractor'):
                raise EvaluationError('extractor {} changed since the profiler was trained'.format(name))

    def evaluate(self, name='profiler', task=None, attacks=None, models=None, eps_k_range=None, prefix=None,
                 n_jobs=1):
        pipeline = self.get_pipeline(name)
        self.check_lineage(pipeline)
        report = evaluate(pipeline, self.get_corpus('test'), task=task, attacks=attacks, models=models,
                          eps_k_range=eps_k_range, train_corpus=self.get_corpus('train'),
                          manifest=self.get_manifest(), n_jobs=n_jobs)
        prefix = '{}_{}'.format(name, report.task) if prefix is None else prefix
        report.save(self.study_folder / 'reports', prefix)
        return report

    def eps_trend(self, name='profiler', attack=AttackKind.FGSM):
        pipeline = self.get_pipeline(name)
        self.check_lineage(pipeline)
        trend = eps_trend(pipeline, self.get_corpus('test'), attack=attack, train_corpus=self.get_corpus('train'),
                          manifest=self.get_manifest())
        _write_table(trend, self.study_folder / 'tables' / 'eps_trend_{}.csv'.format(name))
        return trend

    def signature_quality(self, name='glof'):
        return signature_quality(self.get_extractor(name), self.get_corpus('test'), self.get_store())

    def _train_pipeline(self, train, store, extractor_cfg, stage1_cfg, stage2_cfg, verbose=False):
        extractor = None
        if stage2_cfg.use_extractor and not stage2_cfg.skip_pretrain:
            extractor = SignatureExtractor(extractor_cfg.replace(variant=stage2_cfg.variant))
            extractor, _ = stage1_train(extractor, train, store, stage1_cfg, verbose=verbose)
        pipeline = build_pipeline(stage2_cfg, extractor, extractor_cfg=extractor_cfg)
        pipeline, _ = stage2_train(pipeline, train, stage2_cfg, verbose=verbose)
        return pipeline, extractor

    def cross_model(self, extractor_cfg=None, stage1_cfg=None, stage2_cfg=None, verbose=False):
        """3×3 grid of train-on-one-model / test-on-each-model accuracy."""
        extractor_cfg = ExtractorConfig() if extractor_cfg is None else extractor_cfg
        stage1_cfg = Stage1Config() if stage1_cfg is None else stage1_cfg
        stage2_cfg = Stage2Config() if stage2_cfg is None else stage2_cfg
        store = self.get_store()

        def factory(train_subset):
            return self._train_pipeline(train_subset, store, extractor_cfg, stage1_cfg, stage2_cfg, verbose)[0]

        grid = cross_model_eval(factory, self.get_corpus('train'), self.get_corpus('test'),
                                model_ids=tuple(range(len(MODEL_FAMILIES))), task=stage2_cfg.task,
                                manifest=self.get_manifest())
        _write_table(grid, self.study_folder / 'tables' / 'cross_model.csv', index=True)
        return grid

    def export_features(self, name='profiler', split='test'):
        path = self.study_folder / 'tables' / 'features_{}_{}.csv'.format(name, split)
        return export_features(self.get_pipeline(name), self.get_corpus(split), path)

    def inspect(self, record, split='test', name=None, extractor_name='glof'):
        """
        Dump the clean image, the adversarial image, the normalised
        perturbation and the normalised extracted signature of one record
        as PPM files in inspect/.
        """
        corpus = self.get_corpus(split)
        if not 0 <= record < len(corpus):
            raise ConfigurationError('record {} out of range (0..{})'.format(record, len(corpus) - 1))
        store = self.get_store()
        adv = corpus.images_float(record)
        clean = store.images_float(int(corpus.clean_ids[record]))
        extractor = None
        if name is not None:
            extractor = self.get_pipeline(name).extractor
        elif extractor_name in self.extractor_names:
            extractor = self.get_extractor(extractor_name)
        images = dict(clean=clean, adv=adv, perturbation=normalize_for_display(adv - clean))
        if extractor is not None:
            images['signature'] = normalize_for_display(extract_signature(extractor, adv)[1])
        paths = {}
        for kind, image in images.items():
            path = self.study_folder / 'inspect' / '{}_{}_{}.ppm'.format(split, record, kind)
            write_ppm(path, image)
            paths[kind] = path
        logger.info('record %d (%s): %s', record, split, sorted(paths))
        return paths

    # experiments
    def run_ablations(self, extractor_cfg=None, stage1_cfg=None, stage2_cfg=None, ablations=ABLATIONS,
                      verbose=False):
        """
        Train and evaluate the pipeline variants; writes tables/ablation.csv
        and tables/signature_quality.csv (one row per pre-trained variant).
        """
        extractor_cfg = ExtractorConfig() if extractor_cfg is None else extractor_cfg
        stage1_cfg = Stage1Config() if stage1_cfg is None else stage1_cfg
        stage2_cfg = Stage2Config() if stage2_cfg is None else stage2_cfg
        store = self.get_store()
        train, test = self.get_corpus('train'), self.get_corpus('test')
        manifest = self.get_manifest()
        flags = {
            'full': dict(),
            'no-pretrain': dict(skip_pretrain=True),
            'glof-c': dict(variant='glof-c'),
            'glof-a': dict(variant='glof-a'),
            'no-fusion': dict(fusion=False),
            'no-extractor': dict(use_extractor=False, fusion=False, freeze_extractor=False, skip_pretrain=False),
        }
        rows, quality = [], []
        for ablation in ablations:
            if ablation not in flags:
                raise ConfigurationError('unknown ablation {}'.format(ablation))
            cfg = stage2_cfg.replace(**flags[ablation])
            pipeline, extractor = self._train_pipeline(train, store, extractor_cfg, stage1_cfg, cfg, verbose)
            report = evaluate(pipeline, test, train_corpus=train, manifest=manifest)
            rows.append(dict(ablation=ablation, task=report.task, accuracy=report.accuracy,
                             family_accuracy=report.family_accuracy, num_records=report.num_records))
            if extractor is not None and ablation in ('full', 'glof-c', 'glof-a'):
                quality.append(signature_quality(extractor, test, store).to_dict())
            logger.info('ablation %s accuracy %.4f', ablation, report.accuracy)
        ablation_table = pd.DataFrame(rows, columns=['ablation', 'task', 'accuracy', 'family_accuracy',
                                                     'num_records'])
        _write_table(ablation_table, self.study_folder / 'tables' / 'ablation.csv')
        if quality:
            _write_table(pd.DataFrame(quality), self.study_folder / 'tables' / 'signature_quality.csv')
        return ablation_table

    def run_sweep(self, param, values, extractor_cfg=None, stage1_cfg=None, stage2_cfg=None, verbose=False):
        """
        'levels': attack identification accuracy per number of levels.
        'heads': rectified image PSNR / SSIM per number of attention heads.
        Writes tables/sweep_<param>.csv.
        """
        if param not in SWEEP_PARAMS:
            raise ConfigurationError('sweep parameter must be one of {}'.format(SWEEP_PARAMS))
        extractor_cfg = ExtractorConfig() if extractor_cfg is None else extractor_cfg
        stage1_cfg = Stage1Config() if stage1_cfg is None else stage1_cfg
        stage2_cfg = Stage2Config() if stage2_cfg is None else stage2_cfg
        store = self.get_store()
        train, test = self.get_corpus('train'), self.get_corpus('test')
        manifest = self.get_manifest()
        rows = []
        for value in values:
            cfg = extractor_cfg.replace(**{param: int(value)}).validate()
            if param == 'levels':
                pipeline, _ = self._train_pipeline(train, store, cfg, stage1_cfg, stage2_cfg, verbose)
                report = evaluate(pipeline, test, train_corpus=train, manifest=manifest)
                rows.append(dict(levels=int(value), accuracy=report.accuracy))
            else:
                extractor, _ = stage1_train(SignatureExtractor(cfg), train, store, stage1_cfg, verbose=verbose)
                q = signature_quality(extractor, test, store)
                rows.append(dict(heads=int(value), psnr=q.psnr, ssim=q.ssim))
            logger.info('sweep %s=%s %s', param, value, rows[-1])
        sweep = pd.DataFrame(rows)
        _write_table(sweep, self.study_folder / 'tables' / 'sweep_{}.csv'.format(param))
        return sweep
