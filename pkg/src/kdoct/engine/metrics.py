"""Confusion matrices and one-vs-rest accuracy / sensitivity / specificity."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np


@dataclass(frozen=True)
class ConfusionMatrix:
    """K x K counts; rows are true classes, columns predictions."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if c.ndim != 2 or c.shape[0] != c.shape[1] or c.shape[0] < 1:
            raise ValueError(f"confusion matrix must be square and nonempty, got shape {c.shape}")
        if (c < 0).any():
            raise ValueError("confusion counts must be nonnegative")
        object.__setattr__(self, "counts", c)

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    def tolist(self) -> list:
        return self.counts.tolist()


def confusion(preds, labels, k: int) -> ConfusionMatrix:
    preds = np.asarray(preds, dtype=np.int64).reshape(-1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if preds.shape != labels.shape:
        raise ValueError(f"{preds.size} predictions for {labels.size} labels")
    for name, arr in (("prediction", preds), ("label", labels)):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise ValueError(f"{name} values must lie in [0, {k}), got range [{arr.min()}, {arr.max()}]")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    return ConfusionMatrix(counts)


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    sensitivity: float
    specificity: float
    per_class_sensitivity: tuple
    per_class_specificity: tuple
    excluded_sensitivity: tuple = ()   # classes with no ground-truth positives
    excluded_specificity: tuple = ()   # classes with a zero TN + FP denominator
    exact: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def degenerate(self) -> bool:
        return bool(self.excluded_sensitivity or self.excluded_specificity)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "per_class_sensitivity": list(self.per_class_sensitivity),
            "per_class_specificity": list(self.per_class_specificity),
            "excluded_sensitivity": list(self.excluded_sensitivity),
            "excluded_specificity": list(self.excluded_specificity),
        }


def _mean(values):
    return sum(values, Fraction(0)) / len(values) if values else None


def metrics_from_confusion(cm: ConfusionMatrix) -> Metrics:
    """Accuracy plus macro one-vs-rest sensitivity and specificity.

    Computed in exact rational arithmetic and rounded once to float.
    Classes whose denominator is zero are left out of the macro mean and
    listed in ``excluded_*``.
    """
    c = cm.counts
    n = int(c.sum())
    if n == 0:
        raise ValueError("cannot compute metrics from an empty confusion matrix")
    k = cm.k
    sens, spec, ex_sens, ex_spec = [], [], [], []
    for i in range(k):
        tp = int(c[i, i])
        fn = int(c[i].sum()) - tp
        fp = int(c[:, i].sum()) - tp
        tn = n - tp - fn - fp
        if tp + fn:
            sens.append(Fraction(tp, tp + fn))
        else:
            sens.append(None)
            ex_sens.append(i)
        if tn + fp:
            spec.append(Fraction(tn, tn + fp))
        else:
            spec.append(None)
            ex_spec.append(i)
    acc = Fraction(int(np.trace(c)), n)
    macro_sens = _mean([s for s in sens if s is not None])
    macro_spec = _mean([s for s in spec if s is not None])

    def f(x):
        return float("nan") if x is None else float(x)

    return Metrics(
        accuracy=f(acc),
        sensitivity=f(macro_sens),
        specificity=f(macro_spec),
        per_class_sensitivity=tuple(None if s is None else float(s) for s in sens),
        per_class_specificity=tuple(None if s is None else float(s) for s in spec),
        excluded_sensitivity=tuple(ex_sens),
        excluded_specificity=tuple(ex_spec),
        exact={"accuracy": acc, "sensitivity": macro_sens, "specificity": macro_spec},
    )
