"""Segmentation metrics: class-mean IoU and Dice over binary masks.

Counts pool over everything passed to an accumulator before the division,
so dataset-level metrics come from merging per-batch updates. A class that
is empty in both prediction and target scores 1.0.
"""

from __future__ import annotations

import numpy as np

from .errors import DataValidationError, ShapeError
from .tensor import Tensor


def _as_binary_array(x, what: str) -> np.ndarray:
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if not np.all((data == 0) | (data == 1)):
        raise DataValidationError(f"{what} must be binary (exactly 0/1 valued)")
    return data


def binarize_logits(logits, mode: str = "multilabel") -> np.ndarray:
    """Thresholds logits to a binary mask.

    multilabel: sigmoid > 0.5 per channel (logit 0 maps to 0);
    multiclass: one-hot of the channel argmax.
    """
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if mode == "multilabel":
        return (data > 0).astype(np.float32)
    if mode == "multiclass":
        k = data.shape[1]
        idx = data.argmax(axis=1)
        out = np.zeros_like(data, dtype=np.float32)
        np.put_along_axis(out, idx[:, None], 1.0, axis=1)
        return out
    raise DataValidationError(f"unknown binarize mode {mode!r}")


class SegmentationTotals:
    """Associative accumulator of per-class confusion counts."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.intersection = np.zeros(num_classes, dtype=np.int64)
        self.union = np.zeros(num_classes, dtype=np.int64)
        self.pred_size = np.zeros(num_classes, dtype=np.int64)
        self.target_size = np.zeros(num_classes, dtype=np.int64)

    def update(self, pred, target) -> "SegmentationTotals":
        p = _as_binary_array(pred, "pred")
        t = _as_binary_array(target, "target")
        if p.shape != t.shape:
            raise ShapeError(f"pred {p.shape} vs target {t.shape}")
        if p.shape[1] != self.num_classes:
            raise ShapeError(f"expected {self.num_classes} classes, got {p.shape[1]}")
        axes = tuple(i for i in range(p.ndim) if i != 1)
        p_b = p.astype(bool)
        t_b = t.astype(bool)
        self.intersection += (p_b & t_b).sum(axis=axes)
        self.union += (p_b | t_b).sum(axis=axes)
        self.pred_size += p_b.sum(axis=axes)
        self.target_size += t_b.sum(axis=axes)
        return self

    def merge(self, other: "SegmentationTotals") -> "SegmentationTotals":
        self.intersection += other.intersection
        self.union += other.union
        self.pred_size += other.pred_size
        self.target_size += other.target_size
        return self

    def miou(self) -> float:
        per_class = np.where(self.union > 0, self.intersection / np.maximum(self.union, 1), 1.0)
        return float(per_class.mean())

    def dsc(self) -> float:
        denom = self.pred_size + self.target_size
        per_class = np.where(denom > 0, 2.0 * self.intersection / np.maximum(denom, 1), 1.0)
        return float(per_class.mean())


def miou(pred, target) -> float:
    """Class-mean intersection-over-union pooled over the whole batch."""
    p = _as_binary_array(pred, "pred")
    return SegmentationTotals(p.shape[1]).update(pred, target).miou()


def dsc(pred, target) -> float:
    """Class-mean Dice coefficient pooled over the whole batch."""
    p = _as_binary_array(pred, "pred")
    return SegmentationTotals(p.shape[1]).update(pred, target).dsc()


def pooled_metrics(preds, targets, pooling: str = "dataset") -> tuple[float, float]:
    """(mIoU, DSC) over an iterable of (pred, target) pairs.

    ``dataset`` pools counts over everything before dividing; ``image``
    computes per-image metrics and averages them.
    """
    if pooling == "dataset":
        totals: SegmentationTotals | None = None
        for p, t in zip(preds, targets):
            if totals is None:
                arr = p.data if isinstance(p, Tensor) else np.asarray(p)
                totals = SegmentationTotals(arr.shape[1])
            totals.update(p, t)
        if totals is None:
            raise DataValidationError("no samples to evaluate")
        return totals.miou(), totals.dsc()
    if pooling == "image":
        mious, dscs = [], []
        for p, t in zip(preds, targets):
            arr = p.data if isinstance(p, Tensor) else np.asarray(p)
            tar = t.data if isinstance(t, Tensor) else np.asarray(t)
            for i in range(arr.shape[0]):
                st = SegmentationTotals(arr.shape[1]).update(arr[i:i + 1], tar[i:i + 1])
                mious.append(st.miou())
                dscs.append(st.dsc())
        if not mious:
            raise DataValidationError("no samples to evaluate")
        return float(np.mean(mious)), float(np.mean(dscs))
    raise DataValidationError(f"unknown pooling mode {pooling!r}")
