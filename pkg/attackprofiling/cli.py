"""
Command line driver over a study folder.

    python -m attackprofiling dataset --study-folder study
    python -m attackprofiling train-target --study-folder study
    python -m attackprofiling gen-aid --study-folder study --n-jobs 4
    python -m attackprofiling train-extractor --study-folder study
    python -m attackprofiling train-profiler --study-folder study
    python -m attackprofiling evaluate --study-folder study --task family

Configuration precedence: flags > ``--config`` JSON file (an object keyed
by subcommand, or flat; dataclass groups may be nested under their own key
such as "stage1") > defaults. Exit codes: 0 ok, 1 runtime failure, 2 usage
or configuration error.
"""
import argparse
import json
import logging
import sys

from .aidstudy import AidStudy, DatasetConfig, GenerationConfig, ABLATIONS, SWEEP_PARAMS, make_benign_store
from .attacktools import AttackConfig, ATTACK_NAMES
from .configtools import load_config_file, resolve_config
from .errors import AttackProfilingError, ConfigurationError
from .glof import ExtractorConfig, VARIANTS
from .profiler import FusionConfig, TASKS
from .targets import ArchitectureSpec, TrainConfig, MODEL_FAMILIES
from .trainpipe import Stage1Config, Stage2Config
from .version import version

logger = logging.getLogger(__name__)


def _common_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--study-folder', required=True, help='study folder')
    common.add_argument('--config', default=None, help='JSON config file')
    common.add_argument('-v', '--verbose', action='count', default=0, help='-v info, -vv debug')
    common.add_argument('--n-jobs', type=int, default=1, help='joblib workers')
    common.add_argument('--seed', type=int, default=None, help='master seed')
    return common


def _stage_flags(p, prefix=''):
    p.add_argument('--{}iterations'.format(prefix), type=int, default=None)
    p.add_argument('--{}lr'.format(prefix), type=float, default=None)
    p.add_argument('--{}batch-size'.format(prefix), type=int, default=None)


def _extractor_flags(p):
    p.add_argument('--levels', type=int, default=None)
    p.add_argument('--heads', type=int, default=None)
    p.add_argument('--token-width', type=int, default=None)
    p.add_argument('--grid-width', type=int, default=None)
    p.add_argument('--patch', type=int, default=None)


def _profiler_flags(p):
    p.add_argument('--task', choices=sorted(TASKS), default=None)
    p.add_argument('--variant', choices=VARIANTS, default=None)
    p.add_argument('--freeze-extractor', action='store_true', default=None)
    p.add_argument('--skip-pretrain', action='store_true', default=None)
    p.add_argument('--no-fusion', dest='fusion', action='store_false', default=None)
    p.add_argument('--no-extractor', dest='use_extractor', action='store_false', default=None)


def build_parser():
    parser = argparse.ArgumentParser(prog='attackprofiling', description='Adversarial attack profiling toolkit')
    parser.add_argument('--version', action='version', version=version)
    common = _common_parser()
    sub = parser.add_subparsers(dest='command', metavar='command')
    sub.required = True

    p = sub.add_parser('dataset', parents=[common], help='generate and split the benign images')
    p.add_argument('--n-per-class', type=int, default=None)
    p.add_argument('--classes', type=int, default=None)
    p.add_argument('--size', type=int, default=None)
    p.add_argument('--train-fraction', type=float, default=None)
    p.add_argument('--external', default=None, help='binary corpus (label byte + 3·32·32 pixels per record)')

    p = sub.add_parser('train-target', parents=[common], help='train the victim classifiers')
    p.add_argument('--families', nargs='+', choices=MODEL_FAMILIES, default=list(MODEL_FAMILIES))
    p.add_argument('--epochs', type=int, default=None)
    p.add_argument('--batch-size', type=int, default=None)
    p.add_argument('--lr', type=float, default=None)
    p.add_argument('--depth', type=int, default=None)
    p.add_argument('--width', type=int, default=None)

    p = sub.add_parser('gen-aid', parents=[common], help='generate the adversarial corpus')
    p.add_argument('--per-attack-train', type=int, default=None)
    p.add_argument('--per-attack-test', type=int, default=None)
    p.add_argument('--max-retries', type=int, default=None)
    p.add_argument('--keep-failures', action='store_true', default=None)
    p.add_argument('--max-queries', type=int, default=None)

    p = sub.add_parser('train-extractor', parents=[common], help='stage 1: pre-train the signature extractor')
    p.add_argument('--name', default='glof')
    p.add_argument('--variant', choices=VARIANTS, default=None)
    _stage_flags(p)
    _extractor_flags(p)

    p = sub.add_parser('train-profiler', parents=[common], help='stage 2: train the profiling pipeline')
    p.add_argument('--name', default='profiler')
    p.add_argument('--extractor-name', default='glof')
    _stage_flags(p)
    _profiler_flags(p)

    p = sub.add_parser('evaluate', parents=[common], help='evaluate a profiler on the test corpus')
    p.add_argument('--name', default='profiler')
    p.add_argument('--task', choices=sorted(TASKS), default=None)
    p.add_argument('--attacks', nargs='+', choices=ATTACK_NAMES, default=None)
    p.add_argument('--models', nargs='+', type=int, default=None)
    p.add_argument('--eps-range', nargs=2, type=int, default=None, metavar=('LOW', 'HIGH'))
    p.add_argument('--prefix', default=None)
    p.add_argument('--trend', action='store_true', help='also write the FGSM eps trend table')

    p = sub.add_parser('cross-model', parents=[common], help='train per target model, test on every model')
    _stage_flags(p, 'stage1-')
    _stage_flags(p, 'stage2-')
    p.add_argument('--task', choices=sorted(TASKS), default=None)

    p = sub.add_parser('export-features', parents=[common], help='penultimate features as a table')
    p.add_argument('--name', default='profiler')
    p.add_argument('--split', choices=('train', 'test'), default='test')

    p = sub.add_parser('inspect', parents=[common], help='dump the images of one record')
    p.add_argument('--record', type=int, required=True)
    p.add_argument('--split', choices=('train', 'test'), default='test')
    p.add_argument('--name', default=None, help='profiler whose extractor gives the signature')
    p.add_argument('--extractor-name', default='glof')

    p = sub.add_parser('ablation', parents=[common], help='train and evaluate the ablated pipelines')
    p.add_argument('--ablations', nargs='+', choices=ABLATIONS, default=list(ABLATIONS))
    _stage_flags(p, 'stage1-')
    _stage_flags(p, 'stage2-')

    p = sub.add_parser('sweep', parents=[common], help='sweep the number of levels or heads')
    p.add_argument('--param', choices=SWEEP_PARAMS, required=True)
    p.add_argument('--values', nargs='+', type=int, required=True)
    _stage_flags(p, 'stage1-')
    _stage_flags(p, 'stage2-')

    sub.add_parser('stats', parents=[common], help='corpus statistics table')
    return parser


def _section(values, key):
    sub = values.get(key)
    return sub if isinstance(sub, dict) else values


def _resolve(cls, file_values, key, flags, seed=None):
    flags = dict(flags)
    if seed is not None and 'seed' in cls().to_dict():
        flags['seed'] = seed
    return resolve_config(cls, _section(file_values, key), flags)


def _stage_values(args, prefix=''):
    p = prefix.replace('-', '_')
    return dict(iterations=getattr(args, p + 'iterations'), lr=getattr(args, p + 'lr'),
                batch_size=getattr(args, p + 'batch_size'))


def _extractor_values(args):
    return dict(levels=getattr(args, 'levels', None), heads=getattr(args, 'heads', None),
                token_width=getattr(args, 'token_width', None), grid_width=getattr(args, 'grid_width', None),
                patch=getattr(args, 'patch', None), variant=getattr(args, 'variant', None))


def _profiler_values(args):
    return dict(task=args.task, variant=args.variant, freeze_extractor=args.freeze_extractor,
                skip_pretrain=args.skip_pretrain, fusion=args.fusion, use_extractor=args.use_extractor)


def _log_config(command, configs):
    resolved = {k: v.to_dict() for k, v in configs.items()}
    logger.info('%s resolved config: %s', command, json.dumps(resolved, sort_keys=True))
    return resolved


def _experiment_configs(args, file_values):
    extractor_cfg = _resolve(ExtractorConfig, file_values, 'extractor', {}, args.seed)
    stage1_cfg = _resolve(Stage1Config, file_values, 'stage1', _stage_values(args, 'stage1-'), args.seed)
    stage2_flags = _stage_values(args, 'stage2-')
    stage2_flags['task'] = getattr(args, 'task', None)
    stage2_cfg = _resolve(Stage2Config, file_values, 'stage2', stage2_flags, args.seed)
    _log_config(args.command, dict(extractor=extractor_cfg, stage1=stage1_cfg, stage2=stage2_cfg))
    return extractor_cfg, stage1_cfg, stage2_cfg


def dispatch(args):
    file_values = load_config_file(args.config, section=args.command)
    verbose = args.verbose > 0
    command = args.command

    if command == 'dataset':
        cfg = _resolve(DatasetConfig, file_values, 'dataset',
                       dict(n_per_class=args.n_per_class, classes=args.classes, size=args.size,
                            train_fraction=args.train_fraction, external=args.external), args.seed)
        resolved = _log_config(command, dict(dataset=cfg))
        study = AidStudy.create(args.study_folder, make_benign_store(cfg), config=resolved['dataset'])
        print(study)
        return

    study = AidStudy(args.study_folder)
    if command == 'train-target':
        arch = _resolve(ArchitectureSpec, file_values, 'architecture', dict(depth=args.depth, width=args.width))
        train_cfg = _resolve(TrainConfig, file_values, 'train',
                             dict(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr), args.seed)
        _log_config(command, dict(architecture=arch, train=train_cfg))
        histories = study.train_targets(args.families, arch=arch, train_cfg=train_cfg, seed=train_cfg.seed,
                                        verbose=verbose)
        for family, history in histories.items():
            print('{}: test accuracy {:.4f}'.format(family, history['test_accuracy'].iloc[-1]))
    elif command == 'gen-aid':
        gen_cfg = _resolve(GenerationConfig, file_values, 'generation',
                           dict(per_attack_train=args.per_attack_train, per_attack_test=args.per_attack_test,
                                max_retries=args.max_retries, keep_failures=args.keep_failures), args.seed)
        attack_cfg = _resolve(AttackConfig, file_values, 'attack', dict(max_queries=args.max_queries), args.seed)
        _log_config(command, dict(generation=gen_cfg, attack=attack_cfg))
        train, test, manifest = study.generate(attack_cfg, per_attack_train=gen_cfg.per_attack_train,
                                               per_attack_test=gen_cfg.per_attack_test, seed=gen_cfg.seed,
                                               max_retries=gen_cfg.max_retries,
                                               keep_failures=gen_cfg.keep_failures, n_jobs=args.n_jobs,
                                               verbose=verbose)
        print('{} train / {} test records, config hash {}'.format(len(train), len(test), manifest['config_hash']))
    elif command == 'train-extractor':
        extractor_cfg = _resolve(ExtractorConfig, file_values, 'extractor', _extractor_values(args), args.seed)
        stage1_cfg = _resolve(Stage1Config, file_values, 'stage1', _stage_values(args), args.seed)
        _log_config(command, dict(extractor=extractor_cfg, stage1=stage1_cfg))
        _, curve = study.train_extractor(extractor_cfg, stage1_cfg, name=args.name, verbose=verbose)
        last = curve.iloc[-1]
        print('held-out psnr {:.2f} dB (input {:.2f} dB)'.format(last['heldout_psnr'], last['baseline_psnr']))
    elif command == 'train-profiler':
        stage2_flags = _stage_values(args)
        stage2_flags.update(_profiler_values(args))
        stage2_cfg = _resolve(Stage2Config, file_values, 'stage2', stage2_flags, args.seed)
        if not stage2_cfg.use_extractor:
            stage2_cfg = stage2_cfg.replace(fusion=False)
        extractor_cfg = _resolve(ExtractorConfig, file_values, 'extractor', {}, args.seed)
        fusion_cfg = _resolve(FusionConfig, file_values, 'fusion', {})
        _log_config(command, dict(stage2=stage2_cfg, extractor=extractor_cfg, fusion=fusion_cfg))
        _, curve = study.train_profiler(stage2_cfg, name=args.name, extractor_name=args.extractor_name,
                                        extractor_cfg=extractor_cfg, fusion_cfg=fusion_cfg, verbose=verbose)
        print('held-out accuracy {:.4f}'.format(curve['heldout_accuracy'].iloc[-1]))
    elif command == 'evaluate':
        attacks = None if args.attacks is None else [ATTACK_NAMES.index(a) for a in args.attacks]
        logger.info('evaluate %s task=%s attacks=%s models=%s eps_range=%s', args.name, args.task, attacks,
                    args.models, args.eps_range)
        report = study.evaluate(args.name, task=args.task, attacks=attacks, models=args.models,
                                eps_k_range=args.eps_range, prefix=args.prefix, n_jobs=args.n_jobs)
        print(report)
        if args.trend:
            print(study.eps_trend(args.name))
    elif command == 'cross-model':
        extractor_cfg, stage1_cfg, stage2_cfg = _experiment_configs(args, file_values)
        print(study.cross_model(extractor_cfg, stage1_cfg, stage2_cfg, verbose=verbose))
    elif command == 'export-features':
        df = study.export_features(args.name, args.split)
        print('{} rows, {} features'.format(df.shape[0], df.shape[1] - 3))
    elif command == 'inspect':
        paths = study.inspect(args.record, split=args.split, name=args.name, extractor_name=args.extractor_name)
        for kind, path in paths.items():
            print('{}: {}'.format(kind, path))
    elif command == 'ablation':
        extractor_cfg, stage1_cfg, stage2_cfg = _experiment_configs(args, file_values)
        print(study.run_ablations(extractor_cfg, stage1_cfg, stage2_cfg, ablations=args.ablations, verbose=verbose))
    elif command == 'sweep':
        extractor_cfg, stage1_cfg, stage2_cfg = _experiment_configs(args, file_values)
        print(study.run_sweep(args.param, args.values, extractor_cfg, stage1_cfg, stage2_cfg, verbose=verbose))
    elif command == 'stats':
        print(study.stats().to_string(index=False))


def _setup_logging(verbose):
    level = logging.WARNING if verbose == 0 else logging.INFO if verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format='%(asctime)s %(name)s %(levelname)s %(message)s')


def run(argv=None):
    """
    Parse ``argv`` and run one subcommand.

    Returns
    -------
    exit_code: int
        0 ok, 1 runtime failure, 2 usage or configuration error
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 2
    _setup_logging(args.verbose)
    try:
        dispatch(args)
    except ConfigurationError as e:
        parser.print_usage(sys.stderr)
        print('{}: error: {}'.format(args.command, e), file=sys.stderr)
        return 2
    except (AttackProfilingError, OSError) as e:
        print('{}: {}: {}'.format(args.command, type(e).__name__, e), file=sys.stderr)
        logger.debug('failure', exc_info=True)
        return 1
    return 0


def main():
    sys.exit(run())
