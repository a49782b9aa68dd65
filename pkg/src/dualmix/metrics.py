"""Confusion matrices, per-class IoU and mIoU."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

IGNORE = 255


@dataclass
class ConfusionMatrix:
    num_classes: int
    counts: np.ndarray = field(default=None)  # rows: ground truth, cols: prediction
    ignored: int = 0

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum()) + self.ignored

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts + other.counts, self.ignored + other.ignored)


def accumulate(cm: ConfusionMatrix, prediction, ground_truth) -> ConfusionMatrix:
    pred = np.asarray(prediction).astype(np.int64)
    gt = np.asarray(ground_truth).astype(np.int64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    if np.any(pred == IGNORE):
        raise ValueError("predictions may not contain the ignore label")
    c = cm.num_classes
    if np.any((pred < 0) | (pred >= c)):
        raise ValueError(f"prediction values must lie in 0..{c - 1}")
    valid = gt != IGNORE
    if np.any((gt[valid] < 0) | (gt[valid] >= c)):
        raise ValueError(f"ground-truth values must lie in 0..{c - 1} or be {IGNORE}")
    cm.counts += np.bincount(gt[valid] * c + pred[valid], minlength=c * c).reshape(c, c)
    cm.ignored += int((~valid).sum())
    return cm


def per_class_iou(cm: ConfusionMatrix) -> np.ndarray:
    """IoU per class; NaN where the class is absent from both gt and prediction."""
    counts = cm.counts.astype(np.float64)
    inter = np.diag(counts)
    union = counts.sum(axis=0) + counts.sum(axis=1) - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.where(union > 0, union, 1), np.nan)


def miou(cm: ConfusionMatrix) -> float:
    ious = per_class_iou(cm)
    if np.all(np.isnan(ious)):
        raise ValueError("mIoU is undefined: no class occurs in ground truth or prediction")
    return float(np.nanmean(ious))


def confusion_from_maps(num_classes: int, predictions, ground_truths) -> ConfusionMatrix:
    cm = ConfusionMatrix(num_classes)
    for p, g in zip(predictions, ground_truths):
        accumulate(cm, p, g)
    return cm
