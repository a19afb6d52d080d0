"""Classification, probabilistic and spatial-agreement metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import DegenerateInputError, DimensionError, ValidationError
from .gridio import Raster


@dataclass
class ConfusionCounts:
    TP: int
    TN: int
    FP: int
    FN: int

    @property
    def N(self) -> int:
        return self.TP + self.TN + self.FP + self.FN


@dataclass
class ClassificationMetrics:
    counts: ConfusionCounts
    accuracy: float
    precision: float
    recall: float
    f1: float
    fpr: float
    undefined: list = field(default_factory=list)


def _ratio(num, den, name, undefined):
    if den == 0:
        undefined.append(name)
        return 0.0
    return num / den


def confusion_counts(y, p, threshold: float = 0.5) -> ConfusionCounts:
    y = np.asarray(y).ravel()
    pred = np.asarray(p, dtype=np.float64).ravel() >= threshold
    if len(y) != len(pred):
        raise DimensionError("y and p differ in length")
    pos = y == 1
    return ConfusionCounts(int(np.sum(pred & pos)), int(np.sum(~pred & ~pos)),
                           int(np.sum(pred & ~pos)), int(np.sum(~pred & pos)))


def confusion_metrics(y, p, threshold: float = 0.5) -> ClassificationMetrics:
    """Accuracy, precision, recall, F1 and FPR; a positive call is p >= threshold."""
    c = confusion_counts(y, p, threshold)
    undefined: list = []
    return ClassificationMetrics(
        c,
        _ratio(c.TP + c.TN, c.N, "accuracy", undefined),
        _ratio(c.TP, c.TP + c.FP, "precision", undefined),
        _ratio(c.TP, c.TP + c.FN, "recall", undefined),
        _ratio(2 * c.TP, 2 * c.TP + c.FP + c.FN, "f1", undefined),
        _ratio(c.FP, c.FP + c.TN, "fpr", undefined),
        undefined,
    )


def auc_roc(y, p) -> float:
    """Mann-Whitney AUC; tied scores count one half."""
    y = np.asarray(y).ravel()
    p = np.asarray(p, dtype=np.float64).ravel()
    n_pos = int(np.sum(y == 1))
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateInputError("AUC is undefined with a single class")
    ranks = rankdata(p)
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def brier(y, p) -> float:
    y = np.asarray(y, dtype=np.float64).ravel()
    p = np.asarray(p, dtype=np.float64).ravel()
    if np.any((p < 0) | (p > 1)):
        raise ValidationError("probabilities must lie in [0, 1]")
    return float(np.mean((p - y) ** 2))


def mh_density(xy, classes: Raster, k: int = 5) -> np.ndarray:
    """Percentage of points per (flood class, landslide class) cell of a bivariate class map."""
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    codes = classes.sample(xy[:, 0], xy[:, 1])
    codes = codes[np.isfinite(codes)].astype(np.int64)
    counts = np.zeros((k, k))
    np.add.at(counts, (codes // k, codes % k), 1.0)
    total = counts.sum()
    return counts if total == 0 else 100.0 * counts / total


@dataclass
class JaccardResult:
    value: float
    both_empty: bool


def high_mask(classes: Raster, hazard: str, k: int = 5) -> np.ndarray:
    """Cells whose per-hazard class is High or Very High (top two of k)."""
    valid = classes.valid
    codes = np.where(valid, classes.values, 0).astype(np.int64)
    level = codes // k if hazard == "flood" else codes % k
    return valid & (level >= k - 2)


def jaccard(a: np.ndarray, b: np.ndarray) -> JaccardResult:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise DimensionError("masks differ in shape")
    union = np.sum(a | b)
    if union == 0:
        return JaccardResult(1.0, True)
    return JaccardResult(float(np.sum(a & b) / union), False)


def jaccard_high(class_a: Raster, class_b: Raster, k: int = 5) -> dict[str, JaccardResult]:
    if not class_a.same_grid(class_b):
        raise ValidationError("class maps are on different grids")
    return {hz: jaccard(high_mask(class_a, hz, k), high_mask(class_b, hz, k))
            for hz in ("flood", "landslide")}


def macro_average(values) -> tuple[float, int]:
    """Unweighted mean over zones, skipping undefined (None/NaN) entries.

    Returns (mean, number skipped); the mean is NaN when every entry is undefined.
    """
    values = list(values)
    vals = [v for v in values if v is not None and not (isinstance(v, float) and math.isnan(v))]
    skipped = len(values) - len(vals)
    if not vals:
        return math.nan, skipped
    return float(np.mean(vals)), skipped
