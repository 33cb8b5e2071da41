"""Evaluation metrics: confusion-matrix scores and mask-overlap ratios.

Classification metrics reduce per class one-vs-rest, then macro-average.
Zero-denominator cases score 0 and are flagged rather than raising, so
reports stay aggregable over degenerate splits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import MetricError, ShapeError


class ConfusionMatrix:
    """counts[i][j] = number of samples with true class i predicted as j."""

    def __init__(self, n_classes: int, counts: np.ndarray | None = None):
        if counts is None:
            counts = np.zeros((n_classes, n_classes), dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (n_classes, n_classes):
            raise ShapeError(
                f"counts must be {n_classes}x{n_classes}, got {counts.shape}")
        if (counts < 0).any():
            raise ShapeError("confusion counts must be non-negative")
        self.n_classes = n_classes
        self.counts = counts

    @classmethod
    def from_predictions(cls, predictions, labels, n_classes: int):
        predictions = np.asarray(predictions, dtype=np.int64).ravel()
        labels = np.asarray(labels, dtype=np.int64).ravel()
        if predictions.shape != labels.shape:
            raise ShapeError(
                f"predictions ({predictions.shape}) and labels ({labels.shape}) "
                "must have equal length")
        if predictions.size and (
                predictions.min() < 0 or predictions.max() >= n_classes
                or labels.min() < 0 or labels.max() >= n_classes):
            raise ShapeError(f"class indices must lie in 0..{n_classes - 1}")
        counts = np.zeros((n_classes, n_classes), dtype=np.int64)
        np.add.at(counts, (labels, predictions), 1)
        return cls(n_classes, counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def tp_fp_fn_tn(self, c: int):
        tp = int(self.counts[c, c])
        fp = int(self.counts[:, c].sum()) - tp
        fn = int(self.counts[c, :].sum()) - tp
        tn = self.total - tp - fp - fn
        return tp, fp, fn, tn


@dataclass
class MetricReport:
    accuracy: float
    precision_per_class: list
    recall_per_class: list
    f1_per_class: list
    precision_macro: float
    recall_macro: float
    f1_macro: float
    flags: list = field(default_factory=list)
    dice: float | None = None
    iou: float | None = None


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise MetricError("accuracy undefined for an empty confusion matrix")
    return float(np.trace(cm.counts)) / cm.total


def precision_recall_f1(cm: ConfusionMatrix) -> MetricReport:
    """Per-class one-vs-rest precision/recall/F1 plus macro averages.

    Any zero denominator scores 0 and appends a flag string naming the
    class and metric.
    """
    prec, rec, f1, flags = [], [], [], []
    for c in range(cm.n_classes):
        tp, fp, fn, _ = cm.tp_fp_fn_tn(c)
        if tp + fp == 0:
            p = 0.0
            flags.append(f"class {c}: precision denominator zero")
        else:
            p = tp / (tp + fp)
        if tp + fn == 0:
            r = 0.0
            flags.append(f"class {c}: recall denominator zero")
        else:
            r = tp / (tp + fn)
        if p + r == 0:
            f = 0.0
            flags.append(f"class {c}: f1 denominator zero")
        else:
            f = 2 * p * r / (p + r)
        prec.append(p)
        rec.append(r)
        f1.append(f)
    return MetricReport(
        accuracy=accuracy(cm),
        precision_per_class=prec, recall_per_class=rec, f1_per_class=f1,
        precision_macro=float(np.mean(prec)),
        recall_macro=float(np.mean(rec)),
        f1_macro=float(np.mean(f1)),
        flags=flags)


def _as_binary_mask(m, name: str) -> np.ndarray:
    arr = np.asarray(getattr(m, "pixels", m))
    vals = np.unique(arr)
    if not np.isin(vals, (0, 1)).all():
        raise ShapeError(f"{name} must be binary 0/1, found values {vals[:5]}")
    return arr.astype(np.int64)


def dice_coefficient(pred, truth) -> float:
    """2*|intersection| / (|pred| + |truth|); both-empty pairs score 1.0."""
    p = _as_binary_mask(pred, "pred")
    t = _as_binary_mask(truth, "truth")
    if p.shape != t.shape:
        raise ShapeError(f"mask shapes differ: {p.shape} vs {t.shape}")
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & t).sum()) / denom


def iou(pred, truth) -> float:
    """|intersection| / |union| (Jaccard); both-empty pairs score 1.0."""
    p = _as_binary_mask(pred, "pred")
    t = _as_binary_mask(truth, "truth")
    if p.shape != t.shape:
        raise ShapeError(f"mask shapes differ: {p.shape} vs {t.shape}")
    union = int((p | t).sum())
    if union == 0:
        return 1.0
    return int((p & t).sum()) / union
