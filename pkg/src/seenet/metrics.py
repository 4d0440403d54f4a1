"""Segmentation and attention quality metrics: confusion matrix, per-class
IoU / mIoU, and threshold-based attention localization scores."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, UndefinedMetricError
from .masks import AttentionMap

DEFAULT_IGNORE = 255


@dataclass
class ConfusionMatrix:
    """Pixel counts; rows are ground truth, columns are predictions.
    Size is (num_classes + 1) squared: index 0 is the background class."""

    counts: np.ndarray

    @classmethod
    def create(cls, num_classes: int) -> "ConfusionMatrix":
        if num_classes < 1:
            raise ContractError(f"num_classes must be >= 1, got {num_classes}")
        return cls(np.zeros((num_classes + 1, num_classes + 1), dtype=np.int64))

    @property
    def num_labels(self) -> int:
        return self.counts.shape[0]

    @property
    def total_pixels(self) -> int:
        return int(self.counts.sum())

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.counts.shape != self.counts.shape:
            raise ContractError("confusion matrix size mismatch")
        self.counts += other.counts
        return self


def _label_values(m) -> np.ndarray:
    if hasattr(m, "values"):
        return np.asarray(m.values)
    return np.asarray(m)


def confusion_accumulate(pred, gt, cm: ConfusionMatrix,
                         ignore_label: int | None = DEFAULT_IGNORE) -> ConfusionMatrix:
    """Add one prediction/ground-truth pair into the matrix. Pixels whose
    ground truth equals ``ignore_label`` are skipped; any other label outside
    0..num_classes raises, naming the first offending pixel."""
    p = _label_values(pred).astype(np.int64, copy=False)
    g = _label_values(gt).astype(np.int64, copy=False)
    if p.shape != g.shape:
        raise ContractError(f"confusion: pred shape {p.shape} != gt shape {g.shape}")
    p = p.ravel()
    g = g.ravel()
    keep = np.ones(g.size, dtype=bool)
    if ignore_label is not None:
        keep = (g != ignore_label) & (p != ignore_label)
    n = cm.num_labels
    for name, arr in (("gt", g), ("pred", p)):
        bad = keep & ((arr < 0) | (arr >= n))
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise ContractError(
                f"confusion: {name} label {arr[i]} at pixel {i} outside 0..{n - 1}"
            )
    flat = g[keep] * n + p[keep]
    cm.counts += np.bincount(flat, minlength=n * n).reshape(n, n)
    return cm


def miou(cm: ConfusionMatrix) -> tuple[list[float | None], float]:
    """Per-class IoU and its mean. A class absent from both prediction and
    ground truth has no defined IoU (None) and is excluded from the mean."""
    c = cm.counts
    inter = np.diag(c).astype(np.float64)
    union = c.sum(axis=0) + c.sum(axis=1) - np.diag(c)
    ious: list[float | None] = []
    present = []
    for k in range(cm.num_labels):
        if union[k] == 0:
            ious.append(None)
        else:
            v = float(inter[k] / union[k])
            ious.append(v)
            present.append(v)
    if not present:
        raise UndefinedMetricError("miou: no class present in prediction or ground truth")
    return ious, float(np.mean(present))


def _attention_values(attention) -> np.ndarray:
    v = attention.values if isinstance(attention, AttentionMap) else np.asarray(attention)
    if v.ndim != 2:
        raise ContractError(f"attention map must be 2-D, got {v.shape}")
    return v


def binarize_attention(attention, tau: float) -> np.ndarray:
    """Pixels at or above tau times the map maximum; empty for an all-zero map."""
    if not 0.0 < tau < 1.0:
        raise ContractError(f"tau must lie in (0, 1), got {tau}")
    v = _attention_values(attention)
    mx = v.max() if v.size else 0.0
    if mx == 0:
        return np.zeros(v.shape, dtype=bool)
    return v >= tau * mx


def attention_localization_score(attention, gt_mask, tau: float) -> tuple[float, float, float]:
    """(precision, recall, IoU) of the attention binarized at tau * max
    against a binary ground-truth mask. An all-zero attention map scores
    (0, 0, 0) by convention; an empty ground truth has no defined recall."""
    gt = np.asarray(gt_mask).astype(bool)
    v = _attention_values(attention)
    if gt.shape != v.shape:
        raise ContractError(f"attention shape {v.shape} != gt shape {gt.shape}")
    if not gt.any():
        raise UndefinedMetricError("attention_localization_score: empty ground-truth mask")
    pred = binarize_attention(v, tau)
    if not pred.any():
        return 0.0, 0.0, 0.0
    inter = float(np.logical_and(pred, gt).sum())
    precision = inter / float(pred.sum())
    recall = inter / float(gt.sum())
    union = float(np.logical_or(pred, gt).sum())
    return precision, recall, inter / union


def background_leakage(attention, background_mask, tau: float) -> float:
    """Fraction of the binarized attention (at tau * max) that falls on
    background pixels; 0 when the binarized attention is empty."""
    bg = np.asarray(background_mask).astype(bool)
    v = _attention_values(attention)
    if bg.shape != v.shape:
        raise ContractError(f"attention shape {v.shape} != background shape {bg.shape}")
    pred = binarize_attention(v, tau)
    total = float(pred.sum())
    if total == 0:
        return 0.0
    return float(np.logical_and(pred, bg).sum()) / total
