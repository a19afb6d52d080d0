"""Zone-wise feature selection: Pearson collinearity screen, then SHAP retention."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .trees import GbtHyperparams, ShapAttribution, gbt_train, tree_shap

ZERO_IMPORTANCE = 1e-12


@dataclass
class FeatureReport:
    names: list
    pearson: np.ndarray
    constant: list
    dropped_collinear: list
    screened: list
    importance: dict = field(default_factory=dict)      # hazard -> {feature: I}
    importance_pct: dict = field(default_factory=dict)  # hazard -> {feature: P}
    retained: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"names": self.names, "pearson": self.pearson.tolist(), "constant": self.constant,
                "dropped_collinear": self.dropped_collinear, "screened": self.screened,
                "importance": self.importance, "importance_pct": self.importance_pct,
                "retained": self.retained}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureReport":
        return cls(d["names"], np.array(d["pearson"]), d["constant"], d["dropped_collinear"],
                   d["screened"], d["importance"], d["importance_pct"], d["retained"])


def pearson_matrix(X) -> tuple[np.ndarray, np.ndarray]:
    """Pearson r for every column pair, plus a flag per constant column.

    Constant columns get r = 0 against every other column (r_ii stays 1).
    """
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] < 2:
        raise ValueError("need at least two samples")
    dev = X - X.mean(axis=0)
    ss = np.sqrt((dev * dev).sum(axis=0))
    constant = ss == 0
    safe = np.where(constant, 1.0, ss)
    r = (dev.T @ dev) / np.outer(safe, safe)
    r[constant, :] = 0.0
    r[:, constant] = 0.0
    np.fill_diagonal(r, 1.0)
    return np.clip(r, -1.0, 1.0), constant


def collinearity_screen(r, threshold: float = 0.8) -> tuple[list[int], list[int]]:
    """Greedily drop features until no pair has |r| > threshold.

    From the worst pair, the member with the larger mean |r| to the other
    remaining features goes; on a tie the later column goes.
    Returns (kept indices, dropped indices in drop order).
    """
    a = np.abs(np.asarray(r, dtype=np.float64))
    keep = list(range(a.shape[0]))
    dropped = []
    while len(keep) > 1:
        sub = a[np.ix_(keep, keep)].copy()
        np.fill_diagonal(sub, -np.inf)
        flat = int(np.argmax(sub))
        i, j = divmod(flat, len(keep))
        if not sub[i, j] > threshold:
            break
        n_other = len(keep) - 1
        mean_i = (sub[i][np.isfinite(sub[i])].sum()) / n_other
        mean_j = (sub[j][np.isfinite(sub[j])].sum()) / n_other
        lo, hi = min(i, j), max(i, j)
        mean_lo, mean_hi = (mean_i, mean_j) if i < j else (mean_j, mean_i)
        victim = lo if mean_lo > mean_hi else hi
        dropped.append(keep.pop(victim))
    return keep, dropped


def shap_importance(phi: ShapAttribution | np.ndarray) -> tuple[np.ndarray, np.ndarray, bool]:
    """Mean |SHAP| per feature and its percentage share; flag set when all are zero."""
    values = phi.phi if isinstance(phi, ShapAttribution) else np.asarray(phi)
    I = np.abs(values).mean(axis=0)
    I = np.where(I < ZERO_IMPORTANCE, 0.0, I)
    total = I.sum()
    if total == 0:
        return I, np.zeros_like(I), True
    return I, 100.0 * I / total, False


def zone_feature_select(p_flood, p_landslide, names) -> list[str]:
    """A feature survives unless its importance is zero for both hazards."""
    return [n for n, pf, pl in zip(names, p_flood, p_landslide) if pf > 0 or pl > 0]


def select_features(X, labels, names, threshold: float = 0.8,
                    hyper: GbtHyperparams | None = None, seed=0) -> FeatureReport:
    """Run the two-step selection for one zone on its training samples."""
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    names = list(names)
    r, constant = pearson_matrix(X)
    kept, dropped = collinearity_screen(r, threshold)
    kept = [k for k in kept if not constant[k]]
    screened = [names[k] for k in kept]
    report = FeatureReport(names, r, [names[k] for k in np.flatnonzero(constant)],
                           [names[k] for k in dropped], screened)
    hyper = hyper or GbtHyperparams()
    pcts = {}
    for h, hazard in enumerate(("flood", "landslide")):
        y = labels[:, h]
        if not kept or y.min() == y.max():
            I = np.zeros(len(kept))
            P = np.zeros(len(kept))
        else:
            model = gbt_train(X[:, kept], y, hyper, seed=seed + h, feature_names=screened)
            I, P, _ = shap_importance(tree_shap(model, X[:, kept]))
        report.importance[hazard] = dict(zip(screened, map(float, I)))
        report.importance_pct[hazard] = dict(zip(screened, map(float, P)))
        pcts[hazard] = P
    report.retained = zone_feature_select(pcts["flood"], pcts["landslide"], screened)
    return report
