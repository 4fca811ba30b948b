"""Confusion-matrix bookkeeping and the expression-challenge score.

Per-class accuracy is recall (row-normalised diagonal). The challenge
objective weighs the unweighted-mean (macro) F1 at 0.67 and total accuracy
at 0.33. Degenerate 0/0 ratios - a class never predicted or never present -
score 0 rather than raising, so tiny fixtures stay well-defined.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ConfusionMatrix:
    """K x K counts; rows are true classes, columns predictions."""

    def __init__(self, num_classes: int, counts=None):
        if num_classes < 2:
            raise ValueError("need at least 2 classes")
        if counts is None:
            self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        else:
            self.counts = np.array(counts, dtype=np.int64)
            if self.counts.shape != (num_classes, num_classes):
                raise ValueError(f"counts must be {num_classes}x{num_classes}")
            if (self.counts < 0).any():
                raise ValueError("counts must be non-negative")

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def update(self, true_label: int, predicted_label: int) -> None:
        k = self.num_classes
        if not 0 <= true_label < k:
            raise ValueError(f"true label {true_label} out of range [0, {k})")
        if not 0 <= predicted_label < k:
            raise ValueError(f"predicted label {predicted_label} out of range [0, {k})")
        self.counts[true_label, predicted_label] += 1

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge matrices of different sizes")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    def __repr__(self):
        return f"ConfusionMatrix({self.num_classes}, total={self.total})"


@dataclass(frozen=True)
class MetricSummary:
    accuracy: float
    per_class: np.ndarray  # per-class recall, length K
    macro_f1: float


def _safe_div(num, den):
    num = np.asarray(num, dtype=np.float64)
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=np.asarray(den) != 0)
    return out


def summarize(cm: ConfusionMatrix) -> MetricSummary:
    """Total accuracy, per-class recall, and macro F1 (0/0 terms -> 0)."""
    if cm.total == 0:
        raise ValueError("cannot summarize an empty confusion matrix")
    counts = cm.counts.astype(np.float64)
    diag = np.diag(counts)
    recall = _safe_div(diag, counts.sum(axis=1))
    precision = _safe_div(diag, counts.sum(axis=0))
    f1 = _safe_div(2.0 * precision * recall, precision + recall)
    return MetricSummary(
        accuracy=float(diag.sum() / cm.total),
        per_class=recall,
        macro_f1=float(f1.mean()),
    )


def challenge_score(accuracy: float, macro_f1: float) -> float:
    """The competition objective: 0.67 * macro F1 + 0.33 * accuracy."""
    for name, v in (("accuracy", accuracy), ("macro_f1", macro_f1)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name} must be within [0, 1], got {v}")
    return 0.67 * macro_f1 + 0.33 * accuracy


def metrics_report(cm: ConfusionMatrix) -> dict:
    """JSON-ready report: per-class recalls, accuracy, macro F1, score, counts."""
    s = summarize(cm)
    return {
        "per_class": [float(v) for v in s.per_class],
        "accuracy": s.accuracy,
        "macro_f1": s.macro_f1,
        "score": challenge_score(s.accuracy, s.macro_f1),
        "confusion": cm.counts.tolist(),
    }
