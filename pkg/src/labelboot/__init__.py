"""Noisy-label image classification via a three-stage training pipeline.

Stage 1 bootstraps a pseudo-clean subset: a label-conditioned classifier
is trained briefly on noisy labels with a null label input, then a
confidence-balanced split allocates per-noise-transition quotas.
Stage 2 runs label-dropping FixMatch over that split and relabels the
whole training set.  Stage 3 trains the final classifier on the
relabelled data with strong augmentation, MixUp, and post-MixUp label
dropping, yielding a model usable with or without a noisy label at
inference time.
"""

from .bootstrap import (
    BootstrapConfig,
    ConfidenceRecord,
    SplitResult,
    class_balanced_select,
    estimate_transition_matrix,
    noise_balanced_select,
    score_confidences,
    train_bootstrap,
)
from .data import LabeledExample, NoisyDataset, TrainingView, UnlabeledView
from .errors import (
    ConfigError,
    DataFormatError,
    LabelbootError,
    OracleUnavailableError,
    TrainingDivergedError,
)
from .evaluation import EvalReport, clean_set_purity, evaluate, label_sweep
from .final_train import FinalConfig, smooth_labels, train_final
from .fixmatch import (
    PseudoLabelRecord,
    RelabeledDataset,
    SSLConfig,
    label_drop,
    make_pseudo_label,
    relabel_dataset,
    run_ssl,
    ssl_step,
)
from .augment import AugmentPolicy, mixup_batch, strong_augment, weak_augment
from .models import (
    Classifier,
    LabelInput,
    ModelConfig,
    ema_update,
    null_label,
    predict_averaged,
    register_backbone,
)
from .noise import (
    NoiseSpec,
    TransitionMatrix,
    apply_noise_spec,
    inject_asymmetric_noise,
    inject_aux_model_noise,
    inject_symmetric_noise,
    load_noise_file,
    true_transition_matrix,
)
from .pipeline import RunManifest, run_pipeline, resume
from .config import RunConfig, load_config, validate_config
from .pretrain import ContrastiveConfig, nt_xent_loss, pretrain
from .seeding import SeedStreams, derive_seed
from .synthetic import confusable_pair_mapping, make_template_dataset

__version__ = "0.1.0"
