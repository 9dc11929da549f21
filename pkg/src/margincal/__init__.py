"""Distribution-aware margin calibration for mIoU-oriented segmentation training."""

__version__ = "0.1.0"

from .calibration import CalibConfig, ClassStats, MarginOffsets, class_stats, compute_mu, compute_offsets
from .core import LabelMask, ScoreMap, argmax_predict, load_mask, load_scores, save_mask, save_scores
from .losses import (
    LossResult,
    calibrated_log,
    ce_loss,
    combine,
    dice_loss,
    focal_loss,
    lovasz_softmax_loss,
    margins,
    mc_loss,
    rho_margin,
    tversky_loss,
)
from .metrics import ConfusionMatrix, accumulate, iou, report

__all__ = [
    "CalibConfig", "ClassStats", "ConfusionMatrix", "LabelMask", "LossResult", "MarginOffsets",
    "ScoreMap", "accumulate", "argmax_predict", "calibrated_log", "ce_loss", "class_stats",
    "combine", "compute_mu", "compute_offsets", "dice_loss", "focal_loss", "iou", "load_mask",
    "load_scores", "lovasz_softmax_loss", "margins", "mc_loss", "report", "rho_margin",
    "save_mask", "save_scores", "tversky_loss",
]
