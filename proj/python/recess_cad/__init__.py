"""Knee recess detection and distension classification (C++ core)."""

from ._core import (
    Error,
    NoFrameFound,
    UserError,
    ciou_loss,
    class_weight,
    classification_metrics,
    early_stopper,
    extract_scan_frame,
    grouped_kfold,
    interpolated_ap,
    iou,
    phantom,
    predict,
    raw_canvas,
    run_cli,
    weighted_cls_loss,
)

__all__ = [
    "Error",
    "NoFrameFound",
    "UserError",
    "ciou_loss",
    "class_weight",
    "classification_metrics",
    "early_stopper",
    "extract_scan_frame",
    "grouped_kfold",
    "interpolated_ap",
    "iou",
    "phantom",
    "predict",
    "raw_canvas",
    "run_cli",
    "weighted_cls_loss",
]
