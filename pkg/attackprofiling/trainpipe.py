"""
Two-stage training of the profiling pipeline, evaluation reports,
signature quality, cross-model grid and feature export.

Stage 1 pre-trains the signature extractor to rectify adversarial images
(MSE against the clean reference). Stage 2 trains extractor, fusion and
classifier end to end with cross-entropy on attack (or family) labels.
"""
from dataclasses import dataclass, field
from pathlib import Path
import json
import logging

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from tqdm import tqdm

from .attacktools import AttackKind, ATTACK_NAMES, family_array
from .configtools import ConfigMixin
from .errors import ConfigurationError, ContractError, EvaluationError, LeakageError, NumericError, TrainingError
from .evaluationtools import (do_confusion_matrix, compute_class_performance, overall_accuracy,
                              collapse_to_families, psnr, ssim)
from .glof import SignatureExtractor, ExtractorConfig, VARIANTS, extract_signature
from .layers import Adam
from .numerics import Tensor, Tape, backward, cross_entropy, mse_loss
from .profiler import ProfilingPipeline, FusionConfig, TASKS, predict_attack, pipeline_features
from .targets import MODEL_FAMILIES, MODEL_NAMES

logger = logging.getLogger(__name__)

EPS_BUCKETS = ((1, 4), (5, 8), (9, 12), (13, 16))


@dataclass
class Stage1Config(ConfigMixin):
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    decay_rate: float = 0.95
    decay_every: int = 1000
    batch_size: int = 16
    iterations: int = 5000
    holdout_fraction: float = 0.1
    eval_every: int = 500
    seed: int = 0

    def validate(self):
        if self.lr <= 0:
            raise ConfigurationError('lr must be > 0')
        if self.iterations < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigurationError('iterations >= 0, batch_size >= 1 and eval_every >= 1 are required')
        if not 0 <= self.holdout_fraction < 1:
            raise ConfigurationError('holdout_fraction must be in [0, 1)')
        return self


@dataclass
class Stage2Config(Stage1Config):
    lr: float = 1e-4
    iterations: int = 10000
    task: str = 'attack'
    freeze_extractor: bool = False
    skip_pretrain: bool = False
    use_extractor: bool = True
    fusion: bool = True
    variant: str = 'glof'

    def validate(self):
        Stage1Config.validate(self)
        if self.task not in TASKS:
            raise ConfigurationError('task must be one of {}'.format(sorted(TASKS)))
        if self.variant not in VARIANTS:
            raise ConfigurationError('variant must be one of {}'.format(VARIANTS))
        if not self.use_extractor and (self.freeze_extractor or self.skip_pretrain):
            raise ConfigurationError('freeze_extractor and skip_pretrain need an extractor')
        return self


def build_pipeline(cfg, extractor=None, extractor_cfg=None, fusion_cfg=None):
    """
    Assemble a ProfilingPipeline according to the stage-2 ablation flags.

    Parameters
    ----------
    cfg: Stage2Config
    extractor: SignatureExtractor or None
        Pre-trained extractor; ignored with ``skip_pretrain`` (a fresh one
        of the same shape is built) or without ``use_extractor``
    extractor_cfg: ExtractorConfig
        Shape of a fresh extractor when none is given
    fusion_cfg: FusionConfig
    """
    cfg = cfg.validate()
    fusion_cfg = FusionConfig() if fusion_cfg is None else fusion_cfg
    fusion_cfg = fusion_cfg.replace(fusion=cfg.fusion)
    if not cfg.use_extractor:
        extractor = None
    else:
        if extractor_cfg is None:
            extractor_cfg = ExtractorConfig() if extractor is None else extractor.cfg
        extractor_cfg = extractor_cfg.replace(variant=cfg.variant)
        if extractor is None or cfg.skip_pretrain:
            extractor = SignatureExtractor(extractor_cfg.replace(seed=cfg.seed))
        elif extractor.cfg.variant != cfg.variant:
            raise ConfigurationError('extractor variant {} does not match {}'.format(extractor.cfg.variant,
                                                                                   cfg.variant))
    return ProfilingPipeline(extractor, fusion_cfg, task=cfg.task, freeze_extractor=cfg.freeze_extractor,
                             seed=cfg.seed)


def split_holdout(n, fraction, seed):
    """
    Seeded split of record indices into (train, held-out). At least one
    record is held out when fraction > 0 and n > 1.
    """
    order = np.random.default_rng(seed).permutation(n)
    n_hold = int(round(n * fraction))
    if fraction > 0 and n > 1:
        n_hold = min(max(n_hold, 1), n - 1)
    else:
        n_hold = 0
    return np.sort(order[n_hold:]), np.sort(order[:n_hold])


def _batches(rng, ids, batch_size):
    while True:
        order = rng.permutation(ids)
        for start in range(0, order.size, batch_size):
            yield order[start:start + batch_size]


def clean_references(corpus, store, idx=None):
    clean_ids = corpus.clean_ids if idx is None else corpus.clean_ids[idx]
    if clean_ids.size and clean_ids.max() >= len(store):
        raise ContractError('clean id {} is not in the benign store'.format(int(clean_ids.max())))
    return store.images_float(clean_ids)


def _heldout_metrics(extractor, adv, clean):
    rectified, _ = extract_signature(extractor, adv)
    mse = float(np.mean((rectified - clean) ** 2))
    return mse, float(np.mean([psnr(r, c) for r, c in zip(rectified, clean)]))


def stage1_train(extractor, corpus, store, cfg=None, verbose=False):
    """
    Pre-train the signature extractor so that the rectified image matches
    the clean reference of every record.

    Parameters
    ----------
    extractor: SignatureExtractor
    corpus: AidCorpus
        Training records; each clean_id indexes ``store``
    store: BenignStore
    cfg: Stage1Config
    verbose: bool

    Returns
    -------
    extractor: SignatureExtractor
        Same object, trained and in inference mode
    curve: pd.DataFrame
        Columns iteration, train_loss, lr, heldout_mse, heldout_psnr,
        baseline_psnr; one row at iteration 0, every ``eval_every`` and at
        the end
    """
    cfg = Stage1Config() if cfg is None else cfg
    cfg = cfg.validate()
    if len(corpus) == 0:
        raise ConfigurationError('empty training corpus')
    adv = corpus.images_float()
    clean = clean_references(corpus, store)
    train_idx, hold_idx = split_holdout(len(corpus), cfg.holdout_fraction, cfg.seed)
    if hold_idx.size == 0:
        hold_idx = train_idx
    hold_adv, hold_clean = adv[hold_idx], clean[hold_idx]
    baseline = float(np.mean([psnr(a, c) for a, c in zip(hold_adv, hold_clean)]))

    params = extractor.parameters()
    opt = Adam(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, decay_rate=cfg.decay_rate,
               decay_every=cfg.decay_every)
    rng = np.random.default_rng(cfg.seed)
    batches = _batches(rng, train_idx, cfg.batch_size)

    extractor.eval()
    mse, hold_psnr = _heldout_metrics(extractor, hold_adv, hold_clean)
    rows = [dict(iteration=0, train_loss=np.nan, lr=cfg.lr, heldout_mse=mse, heldout_psnr=hold_psnr,
                 baseline_psnr=baseline)]
    losses = []
    iterations = range(1, cfg.iterations + 1)
    if verbose:
        iterations = tqdm(iterations, desc='stage 1')
    for it in iterations:
        idx = next(batches)
        extractor.train()
        try:
            with Tape() as tape:
                rectified, _ = extractor(Tensor(adv[idx]))
                loss = mse_loss(rectified, Tensor(clean[idx]))
            grads = backward(loss, tape, wrt=params)
        except NumericError:
            raise TrainingError('non-finite loss in stage 1', iteration=it)
        lr = opt.current_lr()
        opt.step(grads)
        losses.append(loss.item())
        if it % cfg.eval_every == 0 or it == cfg.iterations:
            extractor.eval()
            mse, hold_psnr = _heldout_metrics(extractor, hold_adv, hold_clean)
            rows.append(dict(iteration=it, train_loss=float(np.mean(losses)), lr=lr, heldout_mse=mse,
                             heldout_psnr=hold_psnr, baseline_psnr=baseline))
            logger.info('stage 1 it %d loss %.6f held-out mse %.6f psnr %.2f (input %.2f)', it,
                        rows[-1]['train_loss'], mse, hold_psnr, baseline)
            losses = []
    extractor.eval()
    curve = pd.DataFrame(rows, columns=['iteration', 'train_loss', 'lr', 'heldout_mse', 'heldout_psnr',
                                        'baseline_psnr'])
    return extractor, curve


def _heldout_accuracy(pipeline, images, targets):
    if targets.size == 0:
        return np.nan
    _, pred = predict_attack(pipeline, images)
    return float(np.mean(pred == targets))


def stage2_train(pipeline, corpus, cfg=None, verbose=False):
    """
    End-to-end training of fusion and classifier (and the extractor unless
    frozen) with cross-entropy.

    Parameters
    ----------
    pipeline: ProfilingPipeline
    corpus: AidCorpus
    cfg: Stage2Config
        ``task`` must match the pipeline head
    verbose: bool

    Returns
    -------
    pipeline: ProfilingPipeline
    curve: pd.DataFrame
        Columns iteration, train_loss, lr, train_accuracy, heldout_accuracy
    """
    cfg = Stage2Config() if cfg is None else cfg
    cfg = cfg.validate()
    if cfg.task != pipeline.task:
        raise ContractError('stage 2 task {} does not match the {}-way head'.format(cfg.task, pipeline.arity))
    if len(corpus) == 0:
        raise ConfigurationError('empty training corpus')
    images = corpus.images_float()
    targets = pipeline.targets(corpus.attacks)
    train_idx, hold_idx = split_holdout(len(corpus), cfg.holdout_fraction, cfg.seed)

    params = pipeline.trainable_parameters()
    opt = Adam(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, decay_rate=cfg.decay_rate,
               decay_every=cfg.decay_every)
    rng = np.random.default_rng(cfg.seed)
    batches = _batches(rng, train_idx, cfg.batch_size)

    pipeline.eval()
    rows = [dict(iteration=0, train_loss=np.nan, lr=cfg.lr, train_accuracy=np.nan,
                 heldout_accuracy=_heldout_accuracy(pipeline, images[hold_idx], targets[hold_idx]))]
    losses, correct, seen = [], 0, 0
    iterations = range(1, cfg.iterations + 1)
    if verbose:
        iterations = tqdm(iterations, desc='stage 2')
    for it in iterations:
        idx = next(batches)
        pipeline.train()
        if pipeline.freeze_extractor and pipeline.extractor is not None:
            # running statistics stay frozen too
            pipeline.extractor.eval()
        try:
            with Tape() as tape:
                logits = pipeline.logits(Tensor(images[idx]))
                loss = cross_entropy(logits, targets[idx])
            grads = backward(loss, tape, wrt=params)
        except NumericError:
            raise TrainingError('non-finite loss in stage 2', iteration=it)
        lr = opt.current_lr()
        opt.step(grads)
        losses.append(loss.item())
        correct += int(np.sum(np.argmax(logits.data, axis=1) == targets[idx]))
        seen += idx.size
        if it % cfg.eval_every == 0 or it == cfg.iterations:
            pipeline.eval()
            rows.append(dict(iteration=it, train_loss=float(np.mean(losses)), lr=lr, train_accuracy=correct / seen,
                             heldout_accuracy=_heldout_accuracy(pipeline, images[hold_idx], targets[hold_idx])))
            logger.info('stage 2 it %d loss %.4f train acc %.3f held-out acc %.3f', it, rows[-1]['train_loss'],
                        rows[-1]['train_accuracy'], rows[-1]['heldout_accuracy'])
            losses, correct, seen = [], 0, 0
    pipeline.eval()
    curve = pd.DataFrame(rows, columns=['iteration', 'train_loss', 'lr', 'train_accuracy', 'heldout_accuracy'])
    return pipeline, curve


@dataclass
class EvalReport:
    """
    Accuracy, per-class performance and confusion of one evaluation.
    """
    task: str
    accuracy: float
    per_class: pd.DataFrame
    confusion: pd.DataFrame
    filters: dict = field(default_factory=dict)
    num_records: int = 0

    def __post_init__(self):
        counts = self.confusion.values
        assert np.array_equal(counts.sum(axis=1), self.per_class['support'].values)
        assert abs(self.accuracy - overall_accuracy(self.confusion)) < 1e-12

    def __repr__(self):
        return 'EvalReport {} accuracy {:.4f} on {} records {}'.format(self.task, self.accuracy, self.num_records,
                                                                     self.filters)

    def family_collapse(self):
        """3-way family confusion (identity for a family-task report)."""
        if self.task == 'family':
            return self.confusion.copy()
        return collapse_to_families(self.confusion)

    @property
    def family_accuracy(self):
        return overall_accuracy(self.family_collapse())

    def summary(self):
        return dict(task=self.task, accuracy=self.accuracy, family_accuracy=self.family_accuracy,
                    num_records=self.num_records, filters=self.filters)

    def save(self, folder, prefix='eval'):
        """
        Writes <prefix>_summary.json, <prefix>_per_class.csv and
        <prefix>_confusion.csv (tab separated) in ``folder``.
        """
        folder = Path(folder)
        folder.mkdir(parents=True, exist_ok=True)
        with open(folder / (prefix + '_summary.json'), 'w', encoding='utf8') as f:
            json.dump(self.summary(), f, indent=4, sort_keys=True)
        per_class = self.per_class.reset_index()[['class', 'label', 'support', 'correct', 'accuracy', 'precision']]
        per_class.to_csv(folder / (prefix + '_per_class.csv'), sep='\t', index=False)
        self.confusion.to_csv(folder / (prefix + '_confusion.csv'), sep='\t')


def check_disjoint(corpus, train_corpus=None, manifest=None):
    """
    Raise LeakageError when evaluated clean images were used for training,
    according to a training corpus and/or a generation manifest. At least
    one of the two is required.
    """
    if train_corpus is None and manifest is None:
        raise ContractError('evaluation needs the training corpus or the generation manifest')
    ids = set(int(i) for i in corpus.clean_ids)
    if train_corpus is not None:
        overlap = ids & set(int(i) for i in train_corpus.clean_ids)
        if overlap:
            raise LeakageError('{} clean images are shared with the training corpus'.format(len(overlap)))
    if manifest is not None:
        overlap = ids & set(manifest['train_clean_ids'])
        if overlap:
            raise LeakageError('{} clean images are listed as training ids in the manifest'.format(len(overlap)))


def _predict_chunk(pipeline, images):
    return predict_attack(pipeline, images)[1]


def predict_labels(pipeline, images, n_jobs=1, chunk_size=256):
    """Chunked prediction, optionally in parallel; chunk order is kept."""
    chunks = [images[s:s + chunk_size] for s in range(0, images.shape[0], chunk_size)]
    if n_jobs == 1:
        preds = [_predict_chunk(pipeline, c) for c in chunks]
    else:
        preds = Parallel(n_jobs=n_jobs)(delayed(_predict_chunk)(pipeline, c) for c in chunks)
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate(pipeline, corpus, task=None, attacks=None, models=None, eps_k_range=None, train_corpus=None,
             manifest=None, n_jobs=1):
    """
    Evaluate a pipeline on a corpus split.

    Parameters
    ----------
    pipeline: ProfilingPipeline
    corpus: AidCorpus
    task: str or None
        Defaults to the pipeline task; 'family' on an attack pipeline maps
        predictions to their family
    attacks, models: list or None
        Keep only these attack labels / model ids
    eps_k_range: (int, int) or None
        Inclusive eps level range
    train_corpus: AidCorpus or None
    manifest: Manifest or None
        Train/eval disjointness of clean images is checked against both when
        given; passing neither is a ContractError
    n_jobs: int

    Returns
    -------
    report: EvalReport
    """
    task = pipeline.task if task is None else task
    if task not in TASKS:
        raise ConfigurationError('task must be one of {}'.format(sorted(TASKS)))
    if task == 'attack' and pipeline.task == 'family':
        raise ContractError('a family classifier cannot be scored on attacks')
    check_disjoint(corpus, train_corpus, manifest)
    subset = corpus.filter(attacks=attacks, models=models, eps_k_range=eps_k_range)
    filters = dict(attacks=None if attacks is None else [int(a) for a in attacks],
                   models=None if models is None else [int(m) for m in models],
                   eps_k_range=None if eps_k_range is None else [int(k) for k in eps_k_range])
    if len(subset) == 0:
        raise EvaluationError('no record left after filtering {}'.format(filters))

    pred = predict_labels(pipeline, subset.images_float(), n_jobs=n_jobs)
    true = pipeline.targets(subset.attacks)
    arity = TASKS[task]
    if task == 'family' and pipeline.task == 'attack':
        true = subset.families
        pred = family_array(pred)
    confusion = do_confusion_matrix(true, pred, arity)
    report = EvalReport(task=task, accuracy=overall_accuracy(confusion), per_class=compute_class_performance(confusion),
                        confusion=confusion, filters=filters, num_records=len(subset))
    logger.info('%r', report)
    return report


def image_quality(rectified, clean):
    """
    PSNR (dB, capped) and SSIM of one pair, or their means over a batch.
    """
    rectified = np.asarray(rectified, dtype=np.float32)
    clean = np.asarray(clean, dtype=np.float32)
    if rectified.ndim == 3:
        return psnr(rectified, clean), ssim(rectified, clean)
    pairs = [(psnr(r, c), ssim(r, c)) for r, c in zip(rectified, clean)]
    if not pairs:
        raise EvaluationError('no image pair to score')
    values = np.array(pairs)
    return float(values[:, 0].mean()), float(values[:, 1].mean())


@dataclass
class QualityReport:
    variant: str
    psnr: float
    ssim: float
    baseline_psnr: float
    baseline_ssim: float
    num_pairs: int

    def __post_init__(self):
        assert -1. <= self.ssim <= 1. and -1. <= self.baseline_ssim <= 1.

    @property
    def psnr_gain(self):
        return self.psnr - self.baseline_psnr

    def to_dict(self):
        return dict(variant=self.variant, psnr=self.psnr, ssim=self.ssim, baseline_psnr=self.baseline_psnr,
                    baseline_ssim=self.baseline_ssim, num_pairs=self.num_pairs)


def signature_quality(extractor, corpus, store):
    """
    Mean PSNR / SSIM of rectified images against their clean references,
    with the adversarial inputs themselves as baseline.
    """
    if len(corpus) == 0:
        raise EvaluationError('empty corpus')
    adv = corpus.images_float()
    clean = clean_references(corpus, store)
    rectified, _ = extract_signature(extractor, adv)
    p, s = image_quality(rectified, clean)
    bp, bs = image_quality(adv, clean)
    report = QualityReport(extractor.cfg.variant, p, s, bp, bs, len(corpus))
    logger.info('%s rectified psnr %.2f ssim %.3f (input %.2f / %.3f)', report.variant, p, s, bp, bs)
    return report


def _model_label(model_id):
    if 0 <= model_id < len(MODEL_FAMILIES):
        return MODEL_NAMES[MODEL_FAMILIES[model_id]]
    return str(model_id)


def cross_model_eval(factory, train, test, model_ids=(0, 1, 2), task='attack', manifest=None):
    """
    Train one pipeline per target-model subset and evaluate it on every
    test subset.

    Parameters
    ----------
    factory: callable
        factory(train_subset) -> trained ProfilingPipeline
    train, test: AidCorpus
    task: str
    manifest: Manifest or None
        Checked with ``train`` for clean-image disjointness before any training
    task: str

    Returns
    -------
    grid: pd.DataFrame
        accuracy, index is the training subset, columns the test subset
    """
    for name, corpus in (('train', train), ('test', test)):
        missing = [m for m in model_ids if not np.any(corpus.models == m)]
        if missing:
            raise ConfigurationError('{} corpus has no record for model(s) {}'.format(name, missing))
    check_disjoint(test, train, manifest)
    labels = [_model_label(m) for m in model_ids]
    grid = pd.DataFrame(np.zeros((len(model_ids), len(model_ids))), index=labels, columns=labels)
    grid.index.name = 'trained_on'
    grid.columns.name = 'tested_on'
    for m_train, label_train in zip(model_ids, labels):
        pipeline = factory(train.filter(models=[m_train]))
        for m_test, label_test in zip(model_ids, labels):
            report = evaluate(pipeline, test, task=task, models=[m_test], train_corpus=train, manifest=manifest)
            grid.at[label_train, label_test] = report.accuracy
        logger.info('cross-model: trained on %s, %s', label_train, grid.loc[label_train].to_dict())
    return grid


def export_features(pipeline, corpus, path=None):
    """
    Penultimate-layer features of the attack classifier, one row per record
    (record_id, attack, family, f0..f{d-1}), written tab separated when a
    path is given.
    """
    feats = pipeline_features(pipeline, corpus.images_float())
    df = pd.DataFrame(feats, columns=['f{}'.format(i) for i in range(feats.shape[1])])
    df.insert(0, 'family', corpus.families)
    df.insert(0, 'attack', corpus.attacks)
    df.insert(0, 'record_id', np.arange(len(corpus)))
    if path is not None:
        try:
            df.to_csv(path, sep='\t', index=False)
        except OSError as e:
            raise OSError('cannot write features to {}: {}'.format(path, e)) from e
    return df


def eps_trend(pipeline, corpus, attack=AttackKind.FGSM, buckets=EPS_BUCKETS, task=None, train_corpus=None,
              manifest=None):
    """
    Identification accuracy of one attack per eps level bucket.
    Empty buckets get a NaN accuracy; clean-image overlap with the training
    corpus / manifest raises LeakageError before any bucket is scored.
    """
    check_disjoint(corpus, train_corpus, manifest)
    rows = []
    for low, high in buckets:
        subset = corpus.filter(attacks=[int(attack)], eps_k_range=(low, high))
        acc, n = np.nan, 0
        if len(subset):
            report = evaluate(pipeline, subset, task=task, train_corpus=train_corpus, manifest=manifest)
            acc, n = report.accuracy, report.num_records
        rows.append(dict(attack_name=ATTACK_NAMES[int(attack)], eps_k_low=low, eps_k_high=high,
                         num_records=n, accuracy=acc))
    return pd.DataFrame(rows, columns=['attack_name', 'eps_k_low', 'eps_k_high', 'num_records', 'accuracy'])
