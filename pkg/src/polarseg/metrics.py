"""Confusion-matrix accumulation and mean IoU for binary open-space masks."""
from __future__ import annotations

import numpy as np

N_CLASSES = 2
CLASS_NAMES = ("occupied", "open")


class ConfusionMatrix:
    """counts[predicted, actual] pixel tallies."""

    def __init__(self, counts: np.ndarray | None = None):
        self.counts = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64) if counts is None \
            else np.asarray(counts, dtype=np.int64).copy()
        if self.counts.shape != (N_CLASSES, N_CLASSES) or (self.counts < 0).any():
            raise ValueError("confusion matrix must be a non-negative 2x2 array")

    def accumulate(self, predicted: np.ndarray, actual: np.ndarray) -> "ConfusionMatrix":
        predicted = np.asarray(predicted)
        actual = np.asarray(actual)
        if predicted.shape != actual.shape:
            raise ValueError(f"shape mismatch: predicted {predicted.shape} vs label {actual.shape}")
        idx = N_CLASSES * predicted.astype(np.int64).ravel() + actual.astype(np.int64).ravel()
        self.counts += np.bincount(idx, minlength=N_CLASSES ** 2).reshape(N_CLASSES, N_CLASSES)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def iou(self) -> np.ndarray:
        """Per-class IoU; NaN for classes absent from both prediction and label."""
        tp = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(axis=0) + self.counts.sum(axis=1) - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(union > 0, tp / np.maximum(union, 1), np.nan)

    def mean_iou(self) -> float:
        if self.total == 0:
            raise ValueError("mean IoU of an empty confusion matrix")
        return float(np.nanmean(self.iou()))


def accumulate(cm: ConfusionMatrix, predicted: np.ndarray, actual: np.ndarray) -> ConfusionMatrix:
    return cm.accumulate(predicted, actual)


def mean_iou(cm: ConfusionMatrix) -> tuple[float, np.ndarray]:
    return cm.mean_iou(), cm.iou()


def frame_mean_iou(predicted: np.ndarray, actual: np.ndarray) -> float:
    """Average of per-frame mIoU over a batch [N, H, W]."""
    return float(np.mean([ConfusionMatrix().accumulate(p, a).mean_iou()
                          for p, a in zip(predicted, actual)]))
