"""Calibration-aware training toolkit.

Provides binned calibration metrics (ECE / SCE / MCE, class-wise ECE,
misclassification AUROC), an auxiliary training loss that aligns per-class
batch-mean predictive confidence with predictive certainty estimated via
efficient MC dropout, composable task losses (CE / LS / FL / FLSD / Brier),
post-hoc temperature scaling, and a small train/evaluate/report pipeline
with corruption-shifted evaluation.
"""

from calibkit.metrics import (
    BinLedger,
    CalibrationReport,
    PredictionBatch,
    bin_assign,
    classwise_ece,
    compute_auroc,
    compute_ece,
    compute_mce,
    compute_sce,
    histogram_data,
)
from calibkit.mc_dropout import McConfig, McEstimate, certainty_from_uncertainty, estimate, estimate_conventional
from calibkit.losses import (
    LossValue,
    TaskLossSpec,
    alignment_loss,
    brier_loss,
    compose_total,
    cross_entropy,
    flsd_loss,
    focal_loss,
    label_smoothing_loss,
)
from calibkit.temperature import TemperatureFit, apply_temperature, fit_temperature
from calibkit.training import RunConfig, TrainLog, grid_search, run_and_persist, train

__version__ = "0.1.0"

__all__ = [
    "BinLedger",
    "CalibrationReport",
    "PredictionBatch",
    "bin_assign",
    "classwise_ece",
    "compute_auroc",
    "compute_ece",
    "compute_mce",
    "compute_sce",
    "histogram_data",
    "McConfig",
    "McEstimate",
    "certainty_from_uncertainty",
    "estimate",
    "estimate_conventional",
    "LossValue",
    "TaskLossSpec",
    "alignment_loss",
    "brier_loss",
    "compose_total",
    "cross_entropy",
    "flsd_loss",
    "focal_loss",
    "label_smoothing_loss",
    "TemperatureFit",
    "apply_temperature",
    "fit_temperature",
    "RunConfig",
    "TrainLog",
    "grid_search",
    "run_and_persist",
    "train",
]
