"""Classification and regression evaluation ("get_metrics").

A :class:`MetricsReport` serialises to JSON as::

    {
      "accuracy": float, "macro_f1": float,
      "per_class": {"positive": {"precision", "recall", "f1", "support"}, ...},
      "mean_ce_loss": float | null, "mse": float | null,
      "confusion": [[int]*3]*3,        # rows = true label, cols = predicted
      "count": int
    }

Precision, recall and F1 are defined as 0 whenever their denominator is 0,
and the macro average always runs over all three classes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractError, DimensionError
from .model import LABELS


def _label_index(label) -> int:
    if isinstance(label, str):
        try:
            return LABELS.index(label)
        except ValueError:
            raise ContractError(f"unknown class {label!r}") from None
    idx = int(label)
    if not 0 <= idx < len(LABELS):
        raise ContractError(f"class index {idx} out of range")
    return idx


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # [true, predicted]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_list(self) -> list[list[int]]:
        return [[int(x) for x in row] for row in self.counts]


def confusion(true_labels: Sequence, predicted: Sequence) -> ConfusionMatrix:
    if len(true_labels) != len(predicted):
        raise DimensionError(f"{len(true_labels)} true labels but {len(predicted)} predictions")
    if len(true_labels) == 0:
        raise DimensionError("confusion matrix over zero examples")
    counts = np.zeros((len(LABELS), len(LABELS)), dtype=np.int64)
    for t, p in zip(true_labels, predicted):
        counts[_label_index(t), _label_index(p)] += 1
    return ConfusionMatrix(counts)


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


@dataclass
class ClassScores:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class MetricsReport:
    accuracy: float
    macro_f1: float
    per_class: dict[str, ClassScores]
    confusion: ConfusionMatrix
    mean_ce_loss: float | None = None
    mse: float | None = None
    count: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "per_class": {
                name: {"precision": s.precision, "recall": s.recall, "f1": s.f1, "support": s.support}
                for name, s in self.per_class.items()
            },
            "mean_ce_loss": self.mean_ce_loss,
            "mse": self.mse,
            "confusion": self.confusion.to_list(),
            "count": self.count,
            **self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def summarize(cm: ConfusionMatrix, losses: Sequence[float] | None = None) -> MetricsReport:
    total = cm.total
    if total == 0:
        raise ContractError("cannot summarize an empty confusion matrix")
    c = cm.counts
    per_class = {}
    for k, name in enumerate(LABELS):
        tp = int(c[k, k])
        fp = int(c[:, k].sum()) - tp
        fn = int(c[k, :].sum()) - tp
        precision = _ratio(tp, tp + fp)
        recall = _ratio(tp, tp + fn)
        f1 = _ratio(2 * precision * recall, precision + recall)
        per_class[name] = ClassScores(precision, recall, f1, int(c[k, :].sum()))
    macro = math.fsum(s.f1 for s in per_class.values()) / len(LABELS)
    mean_loss = None
    if losses is not None and len(losses):
        mean_loss = math.fsum(float(x) for x in losses) / len(losses)
    return MetricsReport(
        accuracy=int(np.trace(c)) / total,
        macro_f1=macro,
        per_class=per_class,
        confusion=cm,
        mean_ce_loss=mean_loss,
        count=total,
    )


def regression_eval(preds: Sequence[float], targets: Sequence[float]) -> float:
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape:
        raise DimensionError(f"prediction shape {p.shape} differs from target shape {t.shape}")
    if p.size == 0:
        raise DimensionError("mean squared error over zero examples")
    return float(np.mean((p - t) ** 2))


def loss_accuracy_correlation(losses: Sequence[float], accuracies: Sequence[float]) -> float:
    """Pearson correlation between two equal-length series."""
    x = np.asarray(losses, dtype=np.float64)
    y = np.asarray(accuracies, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DimensionError(f"series lengths differ: {x.shape} vs {y.shape}")
    if x.size < 2:
        raise ContractError("correlation needs at least two points")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = math.sqrt(float(dx @ dx))
    sy = math.sqrt(float(dy @ dy))
    if sx == 0.0 or sy == 0.0:
        raise ContractError("correlation is undefined for a constant series")
    r = float(dx @ dy) / (sx * sy)
    return max(-1.0, min(1.0, r))
