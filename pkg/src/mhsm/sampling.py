"""Inventory augmentation and negative-sample generation.

Positives are densified by drawing from a Gaussian KDE of the inventory and
thinning the draws to a minimum spacing. Negatives are uniform candidates
that a one-class SVM fitted on the inventory coordinates rejects as outliers
and that keep a minimum distance from every hazard point.
"""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import pdist

from .errors import ConvergenceError, ValidationError
from .partition import Rect

_BATCH = 4096


@dataclass(frozen=True)
class KdeModel:
    support: np.ndarray
    bandwidth: float


def kde_fit(points) -> KdeModel:
    """Isotropic Gaussian KDE with Scott's rule bandwidth n**(-1/6) * pooled std."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 2:
        raise ValidationError("KDE needs at least two points")
    var = pts.var(axis=0, ddof=1)
    pooled = math.sqrt(0.5 * (var[0] + var[1]))
    if not pooled > 0:
        raise ValidationError("KDE support points are all identical")
    bw = len(pts) ** (-1.0 / 6.0) * pooled
    return KdeModel(pts.copy(), float(bw))


class SpacingIndex:
    """Uniform-grid hash for greedy minimum-spacing acceptance."""

    def __init__(self, min_spacing: float):
        self.d = float(min_spacing)
        self.d2 = self.d * self.d
        self.cells = defaultdict(list)

    def _key(self, x, y):
        return (math.floor(x / self.d), math.floor(y / self.d))

    def try_add(self, x: float, y: float) -> bool:
        if self.d <= 0:
            return True
        kx, ky = self._key(x, y)
        for i in (kx - 1, kx, kx + 1):
            for j in (ky - 1, ky, ky + 1):
                for px, py in self.cells.get((i, j), ()):
                    if (px - x) ** 2 + (py - y) ** 2 < self.d2:
                        return False
        self.cells[(kx, ky)].append((x, y))
        return True


@dataclass
class AugmentResult:
    points: np.ndarray
    n_inventory_kept: int
    n_drawn: int
    n_attempts: int
    shortfall: bool


def kde_augment(m: KdeModel, inventory, target_count: int, min_spacing_m: float,
                seed, accept: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> AugmentResult:
    """Inventory plus KDE draws, greedily thinned so all pairs are >= min_spacing_m apart.

    ``accept`` optionally vetoes draws (e.g. those falling outside the study area).
    """
    inv = np.asarray(inventory, dtype=np.float64).reshape(-1, 2)
    if target_count < len(inv):
        raise ValidationError("target_count must be at least the inventory size")
    rng = np.random.default_rng(seed)
    index = SpacingIndex(min_spacing_m)
    kept = [p for p in inv if index.try_add(p[0], p[1])]
    n_inv = len(kept)
    budget = 50 * target_count
    attempts = 0
    while len(kept) < target_count and attempts < budget:
        n = min(_BATCH, budget - attempts)
        src = m.support[rng.integers(0, len(m.support), size=n)]
        draws = src + rng.normal(0.0, m.bandwidth, size=(n, 2))
        ok = np.ones(n, dtype=bool) if accept is None else np.asarray(accept(draws), dtype=bool)
        for p, good in zip(draws, ok):
            attempts += 1
            if good and index.try_add(p[0], p[1]):
                kept.append(p)
                if len(kept) >= target_count:
                    break
    pts = np.array(kept, dtype=np.float64).reshape(-1, 2)
    return AugmentResult(pts, n_inv, len(pts) - n_inv, attempts, len(pts) < target_count)


@dataclass(frozen=True)
class OcsvmModel:
    support_vectors: np.ndarray
    alphas: np.ndarray
    rho: float
    gamma: float
    nu: float
    n_iter: int = 0

    def decision(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64).reshape(-1, 2)
        out = np.empty(len(x))
        for s in range(0, len(x), _BATCH):
            d2 = _sqdist(x[s:s + _BATCH], self.support_vectors)
            out[s:s + _BATCH] = np.exp(-self.gamma * d2) @ self.alphas - self.rho
        return out


def _sqdist(a, b):
    d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d2, 0.0)


def median_gamma(coords) -> float:
    d = pdist(np.asarray(coords, dtype=np.float64))
    med = float(np.median(d[d > 0])) if np.any(d > 0) else 1.0
    return 1.0 / (2.0 * med * med)


def ocsvm_fit(coords, nu: float = 0.1, gamma: Optional[float] = None,
              tol: float = 1e-6, max_iter: int = 100_000) -> OcsvmModel:
    """nu-one-class SVM dual with RBF kernel, solved by maximal-violating-pair SMO.

    Dual: min 1/2 a'Ka  s.t.  0 <= a_i <= 1/(nu n),  sum a = 1.
    """
    X = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    n = len(X)
    if n < 10:
        raise ValidationError("one-class SVM needs at least 10 points")
    if not 0 < nu <= 1:
        raise ValidationError("nu must lie in (0, 1]")
    if gamma is None:
        gamma = median_gamma(X)
    K = np.exp(-gamma * _sqdist(X, X))
    C = 1.0 / (nu * n)
    alpha = np.zeros(n)
    n_full = int(math.floor(nu * n))
    alpha[:n_full] = C
    if n_full < n:
        alpha[n_full] = 1.0 - n_full * C
    alpha = np.clip(alpha, 0.0, C)
    G = K @ alpha
    eps = 1e-12 * C
    it = 0
    while True:
        up = alpha < C - eps       # may increase
        low = alpha > eps          # may decrease
        Gu = np.where(up, G, np.inf)
        Gl = np.where(low, G, -np.inf)
        i = int(np.argmin(Gu))
        j = int(np.argmax(Gl))
        if Gl[j] - Gu[i] < tol:
            break
        if it >= max_iter:
            raise ConvergenceError(f"SMO did not reach KKT tolerance {tol} in {max_iter} iterations")
        it += 1
        quad = max(K[i, i] + K[j, j] - 2.0 * K[i, j], 1e-12)
        delta = (G[j] - G[i]) / quad
        delta = min(delta, C - alpha[i], alpha[j])
        alpha[i] += delta
        alpha[j] -= delta
        G += delta * (K[:, i] - K[:, j])
    free = (alpha > eps) & (alpha < C - eps)
    if np.any(free):
        rho = float(G[free].mean())
    else:
        hi = np.min(G[alpha <= eps]) if np.any(alpha <= eps) else np.max(G)
        lo = np.max(G[alpha >= C - eps]) if np.any(alpha >= C - eps) else np.min(G)
        rho = 0.5 * float(hi + lo)
    sv = alpha > eps
    return OcsvmModel(X[sv].copy(), alpha[sv].copy(), rho, float(gamma), float(nu), it)


@dataclass
class NegativeResult:
    points: np.ndarray
    n_candidates: int
    shortfall: bool


def negative_sample(m: OcsvmModel, extent: Rect, n: int, hazard_points, min_dist_m: float,
                    seed, accept: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> NegativeResult:
    """Uniform candidates kept iff the SVM calls them outliers and they are far from hazards."""
    if n < 1:
        raise ValidationError("n must be >= 1")
    if not (extent.width > 0 and extent.height > 0):
        raise ValidationError(f"degenerate extent {extent}")
    hz = np.asarray(hazard_points, dtype=np.float64).reshape(-1, 2)
    if min_dist_m > math.hypot(extent.width, extent.height) and _any_within(hz, extent):
        # every candidate is closer than min_dist to that hazard point
        return NegativeResult(np.empty((0, 2)), 0, True)
    tree = cKDTree(hz) if len(hz) else None
    rng = np.random.default_rng(seed)
    budget = 1000 * n
    out = []
    seen = 0
    while len(out) < n and seen < budget:
        b = min(_BATCH, budget - seen)
        cand = np.column_stack([rng.uniform(extent.x0, extent.x1, b),
                                rng.uniform(extent.y0, extent.y1, b)])
        seen += b
        ok = m.decision(cand) < 0
        if tree is not None:
            dist, _ = tree.query(cand, k=1)
            ok &= dist >= min_dist_m
        if accept is not None:
            ok &= np.asarray(accept(cand), dtype=bool)
        out.extend(cand[ok][: n - len(out)])
    pts = np.array(out, dtype=np.float64).reshape(-1, 2)
    return NegativeResult(pts, seen, len(pts) < n)


def _any_within(pts, extent: Rect) -> bool:
    return bool(np.any((pts[:, 0] >= extent.x0) & (pts[:, 0] <= extent.x1)
                       & (pts[:, 1] >= extent.y0) & (pts[:, 1] <= extent.y1)))


def largest_remainder(n: int, ratios) -> np.ndarray:
    ratios = np.asarray(ratios, dtype=np.float64)
    raw = n * ratios / ratios.sum()
    counts = np.floor(raw).astype(np.int64)
    rem = raw - counts
    order = np.argsort(-rem, kind="stable")
    counts[order[: n - counts.sum()]] += 1
    return counts


def stratified_split(labels, sort_keys, ratios=(0.8, 0.1, 0.1), seed=0):
    """Index arrays (train, val, test) stratified on the joint (flood, landslide) label.

    ``sort_keys`` is an (n, k) array (e.g. coordinates) used to put each
    stratum in a canonical order before shuffling, so the result does not
    depend on input order.
    """
    labels = np.asarray(labels).reshape(-1, 2)
    keys = np.asarray(sort_keys, dtype=np.float64).reshape(len(labels), -1)
    rng = np.random.default_rng(seed)
    parts = [[], [], []]
    for stratum in ((0, 0), (0, 1), (1, 0), (1, 1)):
        members = np.flatnonzero((labels[:, 0] == stratum[0]) & (labels[:, 1] == stratum[1]))
        if len(members) == 0:
            continue
        order = np.lexsort(keys[members].T[::-1])
        members = members[order]
        members = members[rng.permutation(len(members))]
        counts = largest_remainder(len(members), ratios)
        bounds = np.concatenate([[0], np.cumsum(counts)])
        for k in range(3):
            parts[k].append(members[bounds[k]:bounds[k + 1]])
    return tuple(np.sort(np.concatenate(p)) if p else np.empty(0, dtype=np.int64) for p in parts)


def stratified_kfold(y, k: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Fold membership lists for binary y, each class dealt round-robin after shuffling."""
    y = np.asarray(y)
    folds = [[] for _ in range(k)]
    offset = 0
    for cls in (0, 1):
        idx = np.flatnonzero(y == cls)
        idx = idx[rng.permutation(len(idx))]
        for pos, i in enumerate(idx):
            folds[(pos + offset) % k].append(i)
        offset += len(idx)
    return [np.sort(np.array(f, dtype=np.int64)) for f in folds]
