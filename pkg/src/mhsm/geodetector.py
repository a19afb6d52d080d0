"""Spatial stratified heterogeneity: factor, interaction and risk detectors."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import ConvergenceError, DegenerateInputError, ValidationError

SEVERITY_LABELS = ("VL", "L", "M", "H", "VH")
TIE_BAND = 1e-9
INTERACTION_CODES = {
    "nonlinear-weaken": "NW",
    "uni-weaken": "UW",
    "bi-enhance": "B",
    "independent": "I",
    "nonlinear-enhance": "N",
}


@dataclass
class Stratification:
    labels: np.ndarray
    L: int
    kind: str  # "quantile" | "categorical"
    breaks: list = field(default_factory=list)
    codes: list = field(default_factory=list)
    collapsed: bool = False
    constant: bool = False


def quantile_stratify(values, L: int = 5) -> Stratification:
    """Strata cut at the empirical i/L quantiles; tied cut points merge strata."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if len(v) < L:
        raise ValidationError(f"need at least {L} values to form {L} strata")
    if v.min() == v.max():
        return Stratification(np.zeros(len(v), dtype=np.int64), 1, "quantile", [], [], True, True)
    cuts = np.unique(np.quantile(v, np.arange(1, L) / L))
    raw = np.searchsorted(cuts, v, side="right")
    used, labels = np.unique(raw, return_inverse=True)
    kept_cuts = [float(cuts[u - 1]) for u in used[1:]]
    return Stratification(labels.astype(np.int64), len(used), "quantile", kept_cuts, [],
                          len(used) < L, False)


def categorical_stratify(values) -> Stratification:
    codes, labels = np.unique(np.asarray(values).ravel(), return_inverse=True)
    return Stratification(labels.astype(np.int64), len(codes), "categorical", [],
                          [float(c) for c in codes], False, len(codes) == 1)


@dataclass
class QResult:
    q: float
    N: int
    strata: list  # [(N_h, mean_h, var_h)]


def factor_q(Y, s: Stratification | np.ndarray) -> QResult:
    """q = 1 - sum_h N_h var_h / (N var), population variances."""
    Y = np.asarray(Y, dtype=np.float64).ravel()
    labels = s.labels if isinstance(s, Stratification) else np.asarray(s).ravel()
    if len(Y) != len(labels):
        raise ValidationError("Y and stratum labels differ in length")
    if len(Y) < 2:
        raise ValidationError("q needs at least two samples")
    var = Y.var()
    if not var > 0:
        raise DegenerateInputError("q is undefined when Y has zero variance")
    _, inv = np.unique(labels, return_inverse=True)
    n_h = np.bincount(inv).astype(np.float64)
    sum_h = np.bincount(inv, weights=Y)
    mean_h = sum_h / n_h
    dev = Y - mean_h[inv]
    var_h = np.bincount(inv, weights=dev * dev) / n_h
    q = 1.0 - float(np.sum(n_h * var_h)) / (len(Y) * var)
    strata = [(int(a), float(b), float(c)) for a, b, c in zip(n_h, mean_h, var_h)]
    return QResult(q, len(Y), strata)


@dataclass
class InteractionResult:
    q1: float
    q2: float
    q12: float
    type: str

    @property
    def code(self) -> str:
        return INTERACTION_CODES[self.type]


def classify_interaction(q1: float, q2: float, q12: float) -> str:
    lo, hi, tot = min(q1, q2), max(q1, q2), q1 + q2
    if abs(q12 - tot) <= TIE_BAND:
        return "independent"
    if q12 < lo - TIE_BAND:
        return "nonlinear-weaken"
    if q12 <= hi + TIE_BAND:
        return "uni-weaken"
    if q12 < tot:
        return "bi-enhance"
    return "nonlinear-enhance"


def overlay(s1: Stratification, s2: Stratification) -> np.ndarray:
    pairs = s1.labels.astype(np.int64) * (int(s2.labels.max()) + 1) + s2.labels
    return np.unique(pairs, return_inverse=True)[1]


def interaction_q(Y, s1: Stratification, s2: Stratification) -> InteractionResult:
    q1 = factor_q(Y, s1).q
    q2 = factor_q(Y, s2).q
    q12 = factor_q(Y, overlay(s1, s2)).q
    return InteractionResult(q1, q2, q12, classify_interaction(q1, q2, q12))


def betacf(a: float, b: float, x: float, tol: float = 1e-15, max_iter: int = 10000) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise ConvergenceError("incomplete beta continued fraction did not converge")


def betainc_regularized(a: float, b: float, x: float) -> float:
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * betacf(b, a, 1.0 - x) / b


def f_sf(F: float, df1: float, df2: float) -> float:
    """Upper tail P(F(df1, df2) > F)."""
    if F <= 0:
        return 1.0
    if math.isinf(F):
        return 0.0
    return betainc_regularized(0.5 * df2, 0.5 * df1, df2 / (df2 + df1 * F))


@dataclass
class RiskResult:
    labels: list
    means: list
    counts: list
    F: float
    p_value: float
    significant: bool
    F_infinite: bool = False


def risk_detect(Y, s: Stratification | np.ndarray, alpha: float = 0.05,
                labels: Optional[list] = None) -> RiskResult:
    """One-way ANOVA of Y across strata."""
    Y = np.asarray(Y, dtype=np.float64).ravel()
    lab = s.labels if isinstance(s, Stratification) else np.asarray(s).ravel()
    _, inv = np.unique(lab, return_inverse=True)
    n_h = np.bincount(inv).astype(np.float64)
    k = len(n_h)
    if k < 2 or np.any(n_h < 2):
        raise ValidationError("risk detector needs >= 2 strata with >= 2 samples each")
    mean_h = np.bincount(inv, weights=Y) / n_h
    grand = Y.mean()
    ssb = float(np.sum(n_h * (mean_h - grand) ** 2))
    dev = Y - mean_h[inv]
    ssw = float(np.sum(dev * dev))
    df_b, df_w = k - 1, len(Y) - k
    names = labels if labels is not None else [str(i) for i in range(k)]
    if ssw == 0:
        if ssb == 0:
            return RiskResult(names, mean_h.tolist(), n_h.astype(int).tolist(), 0.0, 1.0, False)
        return RiskResult(names, mean_h.tolist(), n_h.astype(int).tolist(), math.inf, 0.0, True, True)
    F = (ssb / df_b) / (ssw / df_w)
    p = f_sf(F, df_b, df_w)
    return RiskResult(names, mean_h.tolist(), n_h.astype(int).tolist(), float(F), float(p), p < alpha)


def stratum_names(s: Stratification) -> list[str]:
    if s.kind == "categorical":
        return [f"code {c:g}" for c in s.codes]
    if s.L == len(SEVERITY_LABELS):
        return list(SEVERITY_LABELS)
    return [f"S{i + 1}" for i in range(s.L)]


def detector_report(Y, factors: dict, categorical=(), top_k: int = 5, n_strata: int = 5,
                    alpha: float = 0.05) -> dict:
    """Factor q for every factor, interactions among the top_k, risk detector on the top one."""
    Y = np.asarray(Y, dtype=np.float64)
    strat = {}
    q = {}
    excluded = {}
    for name, values in factors.items():
        s = categorical_stratify(values) if name in categorical else quantile_stratify(values, n_strata)
        try:
            q[name] = factor_q(Y, s).q
            strat[name] = s
        except DegenerateInputError as exc:
            excluded[name] = str(exc)
    ranked = sorted(q, key=lambda n: (-q[n], n))
    top = ranked[:min(top_k, len(ranked))]
    matrix = {}
    for i, a in enumerate(top):
        for b in top[i + 1:]:
            r = interaction_q(Y, strat[a], strat[b])
            matrix[f"{a}|{b}"] = {"a": a, "b": b, **asdict(r), "code": r.code}
    risk = None
    if top:
        s = strat[top[0]]
        try:
            risk = asdict(risk_detect(Y, s, alpha, stratum_names(s)))
            risk["factor"] = top[0]
        except ValidationError as exc:
            risk = {"factor": top[0], "error": str(exc)}
    return {
        "n": int(len(Y)),
        "q": {n: q[n] for n in ranked},
        "strata": {n: {"L": strat[n].L, "kind": strat[n].kind, "collapsed": strat[n].collapsed,
                       "constant": strat[n].constant} for n in ranked},
        "excluded": excluded,
        "top": top,
        "interactions": matrix,
        "risk": risk,
    }


def detector_suite(maps: dict, factors: dict, zones, categorical=(), top_k: int = 5,
                   n_strata: int = 5, max_cells: int = 50000, alpha: float = 0.05, seed=0) -> dict:
    """Per-zone, per-hazard detector reports over aligned rasters.

    ``maps`` maps hazard name -> susceptibility Raster; ``factors`` maps
    factor name -> Raster; all share the zone grid.
    """
    rng = np.random.default_rng(seed)
    zv = zones.values
    zone_ids = sorted(int(z) for z in np.unique(zv[zones.valid]))
    out = {}
    for z in zone_ids:
        mask = zones.valid & (zv == z)
        for m in maps.values():
            mask &= m.valid
        for f in factors.values():
            mask &= f.valid
        cells = np.flatnonzero(mask.ravel())
        if len(cells) > max_cells:
            cells = np.sort(rng.choice(cells, max_cells, replace=False))
        zone_out = {}
        for hazard, m in maps.items():
            Y = m.values.ravel()[cells]
            if len(cells) < max(2, n_strata) or not Y.var() > 0:
                zone_out[hazard] = {"n": int(len(cells)), "error": "insufficient or constant susceptibility"}
                continue
            fx = {name: f.values.ravel()[cells] for name, f in factors.items()}
            zone_out[hazard] = detector_report(Y, fx, categorical, top_k, n_strata, alpha)
        out[str(z)] = zone_out
    return out
