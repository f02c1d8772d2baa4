"""
pycascade - Cascade pseudo-labeling for long-tailed semi-supervised detection.

This package provides the pieces of a cascade pseudo-labeling pipeline:
per-class adaptive thresholds, ensemble teacher targets gated per stage,
detection losses with gradients, long-tailed evaluation (Fixed AP), a
synthetic long-tailed world with a toy cascade trainer, and sparse
annotation benchmarks.
"""

__version__ = "0.1.0"
__license__ = "MIT"

from .apm import APMConfig, ClassStatsStore, FixedThresholds, is_monotone, populate_from_labeled
from .core import (
    Annotation,
    BBox,
    Category,
    ClassIndex,
    DatasetBundle,
    DetectionRecord,
    GroupScheme,
    ImageInfo,
    PyCascadeError,
    ScoreSemantics,
    Split,
    assign_class_groups,
)
from .cpl import PseudoLabelSet, TeacherMode, TeacherTarget, ensemble, gate, unlabeled_batch
from .evaluation import EvalConfig, EvalReport, average_precision, evaluate, fixed_ap, pr_curve, pseudo_accuracy
from .geometry import giou, greedy_match, iou, nms
from .losses import LossBreakdown, LossConfig, batch_losses, cls_loss, reg_loss
from .parser import export_coco, export_results, ingest_coco, load_results, parse_coco
from .saod import ErasureReport, erase, recovery_score
from .synthetic import SyntheticConfig, generate_dataset, generate_world, simulate_detector
from .trainer import ToyModel, TrainConfig, ablation_suite, sweep, train

__all__ = [
    "BBox", "ImageInfo", "Category", "Annotation", "DetectionRecord", "DatasetBundle",
    "ClassIndex", "Split", "ScoreSemantics", "GroupScheme", "PyCascadeError", "assign_class_groups",
    "parse_coco", "ingest_coco", "export_coco", "export_results", "load_results",
    "iou", "giou", "nms", "greedy_match",
    "APMConfig", "ClassStatsStore", "FixedThresholds", "is_monotone", "populate_from_labeled",
    "TeacherMode", "TeacherTarget", "PseudoLabelSet", "ensemble", "gate", "unlabeled_batch",
    "LossConfig", "LossBreakdown", "cls_loss", "reg_loss", "batch_losses",
    "EvalConfig", "EvalReport", "average_precision", "fixed_ap", "pr_curve", "pseudo_accuracy", "evaluate",
    "SyntheticConfig", "generate_dataset", "generate_world", "simulate_detector",
    "ToyModel", "TrainConfig", "train", "ablation_suite", "sweep",
    "ErasureReport", "erase", "recovery_score",
]
