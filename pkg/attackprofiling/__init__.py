from .version import version as __version__

from .errors import (AttackProfilingError, DimensionError, ConfigurationError, ContractError, NumericError,
                     TrainingError, AttackInitError, QueryBudgetExceeded, FormatError, EvaluationError,
                     LeakageError)
from .numerics import Tensor, Tape, backward, value_and_grad, grad_check
from .shapeset import BenignStore, shapeset_generate, split_benign, read_external_corpus
from .targets import (ArchitectureSpec, TrainConfig, build_target, train_target, predict, DecisionOracle,
                      save_target, load_target)
from .attacktools import AttackKind, AttackConfig, AttackResult, ATTACK_NAMES, FAMILY_NAMES, family_of, project_norm
from .gradientattacks import fgsm, iterative_gradient, deepfool, deepfool_step, newtonfool, carlini_wagner
from .decisionattacks import severity_search, boundary_attack
from .universalattacks import UniversalPerturbation, uap_build, uan_train
from .attacks import run_attack
from .recordio import AidCorpus, Manifest, read_corpus, write_corpus
from .aidgen import generate_aid, regenerate_from_manifest, audit_corpus
from .glof import ExtractorConfig, SignatureExtractor, glof_forward, t2i, extract_signature
from .profiler import FusionConfig, ProfilingPipeline, fuse, classify
from .evaluationtools import do_confusion_matrix, compute_class_performance, psnr, ssim
from .trainpipe import (Stage1Config, Stage2Config, EvalReport, QualityReport, stage1_train, stage2_train, evaluate,
                        image_quality, signature_quality, cross_model_eval, export_features, eps_trend)

from .aidstudy import AidStudy
