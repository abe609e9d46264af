"""Segmentation scoring: confusion matrix, per-class IoU, mIoU, pixel accuracy."""

from __future__ import annotations

import numpy as np


class ConfusionMatrix:
    """C x C integer counts; rows are ground truth, columns are predictions."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def add(self, pred: np.ndarray, truth: np.ndarray, ignore_index: int = 255) -> None:
        if pred.shape != truth.shape:
            raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
        mask = truth != ignore_index
        t = truth[mask].astype(np.int64)
        p = pred[mask].astype(np.int64)
        if t.size and (t.max() >= self.num_classes or p.max() >= self.num_classes or p.min() < 0):
            raise ValueError(f"class id out of range for {self.num_classes} classes")
        flat = t * self.num_classes + p
        self.counts += np.bincount(flat, minlength=self.num_classes**2).reshape(
            self.num_classes, self.num_classes
        )

    def total(self) -> int:
        return int(self.counts.sum())


def iou_per_class(cm: ConfusionMatrix) -> np.ndarray:
    """IoU per class; NaN where the union is empty."""
    tp = np.diag(cm.counts).astype(np.float64)
    fp = cm.counts.sum(axis=0) - tp
    fn = cm.counts.sum(axis=1) - tp
    union = tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, tp / union, np.nan)


def miou(cm: ConfusionMatrix) -> tuple[float, np.ndarray]:
    """(mean IoU over classes with non-empty union, per-class IoU array)."""
    per_class = iou_per_class(cm)
    present = ~np.isnan(per_class)
    if not present.any():
        return 0.0, per_class
    return float(per_class[present].mean()), per_class


def pixel_accuracy(cm: ConfusionMatrix) -> float:
    total = cm.counts.sum()
    return float(np.diag(cm.counts).sum() / total) if total else 0.0
