"""Per-class intersection-over-union."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .image_core import CLASS_NAMES


@dataclass(frozen=True)
class IoUReport:
    per_class: dict[str, float]
    average: float
    threshold: float = 0.5

    def to_dict(self) -> dict:
        return {"per_class": dict(self.per_class), "average": self.average,
                "threshold": self.threshold}


def class_iou(pred_bin: np.ndarray, gt: np.ndarray) -> float:
    """|pred & gt| / |pred | gt|; 1.0 when both are empty."""
    union = np.count_nonzero(pred_bin | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred_bin & gt) / union


def iou(pred, label, threshold: float = 0.5, class_names=CLASS_NAMES) -> IoUReport:
    """Binarise ``pred`` at ``threshold`` and score it against ``label``.

    Both arrays end in a class axis; any leading axes (batch, rows, cols)
    are pooled, so a batch is scored as one large raster.
    """
    pred = np.asarray(pred)
    label = np.asarray(label)
    if pred.shape != label.shape:
        raise ValueError(f"prediction {pred.shape} and label {label.shape} differ")
    if pred.shape[-1] != len(class_names):
        raise ValueError(f"expected {len(class_names)} classes, got {pred.shape[-1]}")
    pb = pred >= threshold
    gt = label >= 0.5
    per = {name: float(class_iou(pb[..., k], gt[..., k])) for k, name in enumerate(class_names)}
    return IoUReport(per, float(np.mean(list(per.values()))), threshold)
