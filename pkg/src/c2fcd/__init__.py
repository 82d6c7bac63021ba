"""Coarse-to-fine Siamese change detection with mean-teacher training."""

from .errors import ConfigurationError, DataError, NumericError
from .metrics import ConfusionCounts, MetricSet, binarize, compute_metrics, confusion
from .model import (
    C2FNet,
    ModuleToggles,
    build_model,
    fuse_pyramids,
    get_params,
    gradient_audit,
    param_checksum,
    refine_features,
    set_params,
)
from .trainer import (
    EMAState,
    PerturbationConfig,
    TrainConfig,
    bce_with_logits,
    consistency_loss,
    ema_update,
    evaluate_model,
    select_best,
    train_semi,
    train_supervised,
)

__version__ = "0.1.0"

__all__ = [
    "C2FNet",
    "ConfigurationError",
    "ConfusionCounts",
    "DataError",
    "EMAState",
    "MetricSet",
    "ModuleToggles",
    "NumericError",
    "PerturbationConfig",
    "TrainConfig",
    "bce_with_logits",
    "binarize",
    "build_model",
    "compute_metrics",
    "confusion",
    "consistency_loss",
    "ema_update",
    "evaluate_model",
    "fuse_pyramids",
    "get_params",
    "gradient_audit",
    "param_checksum",
    "refine_features",
    "select_best",
    "set_params",
    "train_semi",
    "train_supervised",
    "__version__",
]
