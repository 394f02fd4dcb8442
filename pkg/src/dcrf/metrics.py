"""Per-category and macro-averaged classification metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class MetricsError(ValueError):
    pass


def _as_labels(labels) -> np.ndarray:
    y = np.asarray(labels)
    if not np.all((y == 0) | (y == 1)):
        raise MetricsError("labels must be 0 or 1")
    return y.astype(bool)


def average_precision(scores, labels) -> float:
    """Mean precision at the rank of each positive.

    Ranks by descending score; ties go to the lower node index.  Returns NaN
    when there are no positives.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = _as_labels(labels)
    if s.shape != y.shape:
        raise MetricsError(f"scores {s.shape} and labels {y.shape} differ in shape")
    n_pos = int(y.sum())
    if n_pos == 0:
        return math.nan
    order = np.argsort(-s, kind="stable")
    hits = y[order]
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, n_pos + 1) / ranks))


def threshold_metrics(scores, labels, threshold: float = 0.5) -> tuple[float, float, float]:
    """(recall, precision, accuracy) of ``score >= threshold``; 0/0 counts as 0."""
    s = np.asarray(scores, dtype=np.float64)
    y = _as_labels(labels)
    pred = s >= threshold
    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & ~y))
    fn = int(np.sum(~pred & y))
    tn = int(np.sum(~pred & ~y))
    recall = tp / (tp + fn) if tp + fn else 0.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    accuracy = (tp + tn) / y.size if y.size else 0.0
    return recall, precision, accuracy


@dataclass
class CategoryMetrics:
    name: str
    ap: float
    recall: float
    precision: float
    accuracy: float
    n: int
    positives: int


@dataclass
class MetricsReport:
    categories: list[CategoryMetrics]
    macro_ap: float
    macro_recall: float
    macro_precision: float
    macro_accuracy: float
    excluded: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        """Flat JSON-ready mapping; undefined values become ``None``."""

        def clean(v):
            return None if isinstance(v, float) and math.isnan(v) else v

        out = {
            "macro_ap": self.macro_ap,
            "macro_recall": self.macro_recall,
            "macro_precision": self.macro_precision,
            "macro_accuracy": self.macro_accuracy,
            "n": self.categories[0].n if self.categories else 0,
            "excluded": list(self.excluded),
        }
        for c in self.categories:
            for key in ("ap", "recall", "precision", "accuracy", "positives"):
                out[f"{key}/{c.name}"] = clean(getattr(c, key))
        return out


def category_metrics(name: str, scores, labels, threshold: float = 0.5) -> CategoryMetrics:
    y = np.asarray(labels)
    recall, precision, accuracy = threshold_metrics(scores, y, threshold)
    return CategoryMetrics(name, average_precision(scores, y), recall, precision,
                           accuracy, int(y.size), int(np.sum(y)))


def macro_report(per_category: Sequence[CategoryMetrics]) -> MetricsReport:
    """Average each metric over the categories where AP is defined."""
    defined = [c for c in per_category if not math.isnan(c.ap)]
    if not defined:
        raise MetricsError("no category has a defined average precision")
    excluded = [c.name for c in per_category if math.isnan(c.ap)]
    return MetricsReport(
        categories=list(per_category),
        macro_ap=float(np.mean([c.ap for c in defined])),
        macro_recall=float(np.mean([c.recall for c in defined])),
        macro_precision=float(np.mean([c.precision for c in defined])),
        macro_accuracy=float(np.mean([c.accuracy for c in defined])),
        excluded=excluded,
    )


def evaluate(scores, labels, names: Sequence[str], threshold: float = 0.5) -> MetricsReport:
    """Macro report for N x C score and label matrices."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 2 or s.shape[1] != len(names):
        raise MetricsError(f"shape mismatch: scores {s.shape}, labels {y.shape}, "
                           f"{len(names)} category names")
    return macro_report([category_metrics(name, s[:, c], y[:, c], threshold)
                         for c, name in enumerate(names)])
