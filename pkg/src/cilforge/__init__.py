"""Class-incremental learning with a nested hierarchical transformer.

The training objective combines logit-adjusted cross-entropy against the
old/new class imbalance with dual distillation from the previous-phase model:
cosine feature alignment plus L1 matching of gradient-based attention maps.
Replay uses a herding-selected exemplar memory under a per-class or fixed
total budget.
"""

from .backbone import BackboneConfig, FeatureExtractor, blockify, deblockify
from .config import ExperimentConfig, PRESETS, load_config, resolve_config
from .data import DatasetBundle, PhaseData, PhasePlan, assemble_phase, make_plan, mixup_batch
from .exceptions import (CilforgeError, ConfigurationError, InputError,
                         NonFiniteLossError, StateError)
from .gradcam import CamMap, grad_cam, normalize_cam
from .heads import CosineHead, cosine_logits
from .losses import (BatchParts, LossWeights, PriorPair, adjusted_ce, cam_distill,
                     class_priors, feature_distill, lambda_schedule, total_loss)
from .memory import BudgetPolicy, ExemplarMemory, herding_select, ncm_predict
from .metrics import (MetricsLog, average_incremental_accuracy, confusion_matrix,
                      evaluate_phase, forgetting_rate, last_accuracy)
from .runner import run_experiment, run_repeats
from .training import TrainConfig, lr_at, train_base_phase, train_incremental_phase

__version__ = "0.1.0"
