"""Confusion-matrix evaluation: OA, AA, Kappa, mIoU, per-class accuracy.

Rows of the matrix index the reference class, columns the predicted class.
Zero-support classes (no reference pixels) are excluded from AA, and classes
with empty union are excluded from mIoU; the report records this convention
so either choice can be recomputed from the stored counts.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError
from .raster import IGNORE_LABEL


class ConfusionMatrix:
    """K x K integer counts; accumulation is associative so shards merge by +."""

    def __init__(self, n_classes: int, counts: np.ndarray | None = None):
        if n_classes < 1:
            raise DataError(f"need at least one class, got {n_classes}")
        self.n_classes = int(n_classes)
        if counts is None:
            self.counts = np.zeros((n_classes, n_classes), dtype=np.int64)
        else:
            counts = np.asarray(counts, dtype=np.int64)
            if counts.shape != (n_classes, n_classes):
                raise DataError(f"counts shape {counts.shape} does not match "
                                f"n_classes={n_classes}")
            if (counts < 0).any():
                raise DataError("confusion counts must be nonnegative")
            self.counts = counts.copy()

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(self, predictions: np.ndarray, labels: np.ndarray,
                   valid_mask: np.ndarray | None = None) -> "ConfusionMatrix":
        """Add one batch of pixels; labels equal to IGNORE_LABEL are skipped."""
        pred = np.asarray(predictions).reshape(-1).astype(np.int64)
        lab = np.asarray(labels).reshape(-1).astype(np.int64)
        if pred.shape != lab.shape:
            raise DataError(f"predictions {predictions.shape} vs labels "
                            f"{labels.shape}")
        keep = lab != IGNORE_LABEL
        if valid_mask is not None:
            vm = np.asarray(valid_mask, dtype=bool).reshape(-1)
            if vm.shape != lab.shape:
                raise DataError(f"valid_mask {valid_mask.shape} vs labels "
                                f"{labels.shape}")
            keep &= vm
        pred, lab = pred[keep], lab[keep]
        k = self.n_classes
        if pred.size:
            if pred.min() < 0 or pred.max() >= k:
                raise DataError(f"prediction {int(pred.max())} outside 0..{k - 1}")
            if lab.min() < 0 or lab.max() >= k:
                raise DataError(f"label {int(lab.max())} outside 0..{k - 1}")
            self.counts += np.bincount(lab * k + pred, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.n_classes != self.n_classes:
            raise DataError(f"cannot merge {other.n_classes}-class matrix into "
                            f"{self.n_classes}-class matrix")
        self.counts += other.counts
        return self


def _counts(cm) -> np.ndarray:
    c = cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm)
    c = np.asarray(c, dtype=np.int64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise DataError(f"confusion matrix must be square, got shape {c.shape}")
    if c.sum() <= 0:
        raise DataError("confusion matrix has no evaluated pixels")
    return c


def oa(cm) -> float:
    c = _counts(cm)
    return float(np.trace(c) / c.sum())


def per_class_accuracy(cm) -> np.ndarray:
    """diag / row-sum; NaN for classes with zero reference support."""
    c = _counts(cm).astype(np.float64)
    support = c.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        acc = np.diag(c) / support
    acc[support == 0] = np.nan
    return acc


def aa(cm) -> float:
    acc = per_class_accuracy(cm)
    return float(np.nanmean(acc))


def kappa(cm) -> float:
    c = _counts(cm).astype(np.float64)
    total = c.sum()
    p_o = np.trace(c) / total
    p_e = float(c.sum(axis=1) @ c.sum(axis=0)) / total**2
    if p_e >= 1.0:
        return 0.0
    return float((p_o - p_e) / (1.0 - p_e))


def iou_per_class(cm) -> np.ndarray:
    c = _counts(cm).astype(np.float64)
    diag = np.diag(c)
    union = c.sum(axis=1) + c.sum(axis=0) - diag
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = diag / union
    iou[union == 0] = np.nan
    return iou


def miou(cm) -> float:
    return float(np.nanmean(iou_per_class(cm)))


def metrics_report(cm, class_names: list[str] | None = None) -> dict:
    """Everything derivable from the matrix, plus the conventions used."""
    c = _counts(cm)
    acc = per_class_accuracy(c)
    iou = iou_per_class(c)
    report = {
        "n_classes": int(c.shape[0]),
        "n_pixels": int(c.sum()),
        "oa": oa(c),
        "aa": aa(c),
        "kappa": kappa(c),
        "miou": miou(c),
        "per_class_accuracy": [None if np.isnan(v) else float(v) for v in acc],
        "per_class_iou": [None if np.isnan(v) else float(v) for v in iou],
        "confusion_matrix": c.tolist(),
        "conventions": {
            "rows": "reference",
            "columns": "predicted",
            "zero_support_excluded_from": ["aa", "miou"],
        },
    }
    if class_names is not None:
        report["class_names"] = list(class_names)
    return report
