"""Gradient-boosted decision trees with logistic loss and exact TreeSHAP.

Trees are grown level-wise with exact greedy split search on presorted
features (second-order gain, L2-regularized leaf weights). Leaf weights are
stored unscaled; the learning rate is applied when margins are summed.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numba
import numpy as np

from .errors import ValidationError
from .sampling import stratified_kfold

MARGIN_CAP = 30.0


@dataclass
class GbtHyperparams:
    n_trees: int = 100
    max_depth: int = 4
    learning_rate: float = 0.1
    subsample: float = 1.0
    colsample: float = 1.0
    min_child_weight: float = 1.0
    l2_lambda: float = 1.0
    scale_pos_weight: float = 1.0

    def __post_init__(self):
        if self.n_trees < 1 or self.max_depth < 0:
            raise ValidationError("n_trees must be >= 1 and max_depth >= 0")
        if not (0 < self.subsample <= 1 and 0 < self.colsample <= 1):
            raise ValidationError("subsample and colsample must lie in (0, 1]")
        if self.min_child_weight < 0 or self.l2_lambda < 0 or not self.scale_pos_weight > 0:
            raise ValidationError("invalid min_child_weight / l2_lambda / scale_pos_weight")


@dataclass
class Tree:
    feature: np.ndarray    # int, -1 marks a leaf
    threshold: np.ndarray  # go left iff x < threshold
    left: np.ndarray
    right: np.ndarray
    cover: np.ndarray      # sum of hessians reaching the node
    value: np.ndarray      # leaf weight (0 for internal nodes)

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in
                ("feature", "threshold", "left", "right", "cover", "value")}

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls(np.array(d["feature"], dtype=np.int64), np.array(d["threshold"], dtype=np.float64),
                   np.array(d["left"], dtype=np.int64), np.array(d["right"], dtype=np.int64),
                   np.array(d["cover"], dtype=np.float64), np.array(d["value"], dtype=np.float64))


@dataclass
class GbtModel:
    trees: list
    base_score: float
    learning_rate: float
    feature_names: list
    hyperparams: dict = field(default_factory=dict)
    train_loss: list = field(default_factory=list)
    _packed: Optional[tuple] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not self.trees:
            raise ValidationError("a boosted model needs at least one tree")

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def _pack(self):
        if self._packed is None:
            offsets = np.cumsum([0] + [t.n_nodes for t in self.trees])
            cat = lambda k: np.concatenate([getattr(t, k) for t in self.trees])
            self._packed = (cat("feature"), cat("threshold"),
                            cat("left"), cat("right"), cat("value"), offsets[:-1].astype(np.int64))
        return self._packed

    def margin(self, X) -> np.ndarray:
        X = _check_matrix(X, self.n_features)
        feat, thr, left, right, value, roots = self._pack()
        raw = _predict_sum(X, feat, thr, left, right, value, roots)
        return self.base_score + self.learning_rate * raw

    def predict_proba(self, X) -> np.ndarray:
        return _sigmoid(np.clip(self.margin(X), -MARGIN_CAP, MARGIN_CAP))

    def to_dict(self) -> dict:
        return {"base_score": self.base_score, "learning_rate": self.learning_rate,
                "feature_names": list(self.feature_names), "hyperparams": self.hyperparams,
                "trees": [t.to_dict() for t in self.trees]}

    @classmethod
    def from_dict(cls, d: dict) -> "GbtModel":
        return cls([Tree.from_dict(t) for t in d["trees"]], float(d["base_score"]),
                   float(d["learning_rate"]), list(d["feature_names"]), dict(d.get("hyperparams", {})))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


def _check_matrix(X, p: Optional[int] = None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValidationError(f"feature matrix must be 2-D, got shape {X.shape}")
    if p is not None and X.shape[1] != p:
        raise ValidationError(f"expected {p} features, got {X.shape[1]}")
    if np.isnan(X).any():
        raise ValidationError("feature matrix contains NaN")
    return X


@numba.njit(cache=True)
def _predict_sum(X, feat, thr, left, right, value, roots):
    n = X.shape[0]
    out = np.zeros(n)
    for i in range(n):
        s = 0.0
        for t in range(roots.shape[0]):
            base = roots[t]
            node = 0
            while feat[base + node] >= 0:
                if X[i, feat[base + node]] < thr[base + node]:
                    node = left[base + node]
                else:
                    node = right[base + node]
            s += value[base + node]
        out[i] = s
    return out


@numba.njit(cache=True)
def _grow_tree(X, order, g, h, in_sample, cols, max_depth, min_child_weight, lam):
    n = X.shape[0]
    cap = 2 ** (max_depth + 1)
    feat = -np.ones(cap, dtype=np.int64)
    thr = np.zeros(cap)
    left = -np.ones(cap, dtype=np.int64)
    right = -np.ones(cap, dtype=np.int64)
    cover = np.zeros(cap)
    value = np.zeros(cap)
    G = np.zeros(cap)
    H = np.zeros(cap)
    pos = -np.ones(n, dtype=np.int64)
    for i in range(n):
        if in_sample[i]:
            pos[i] = 0
            G[0] += g[i]
            H[0] += h[i]
    n_nodes = 1
    frontier_lo = 0
    frontier_hi = 1
    GL = np.zeros(cap)
    HL = np.zeros(cap)
    last = np.zeros(cap)
    seen = np.zeros(cap, dtype=np.bool_)
    best_gain = np.zeros(cap)
    best_feat = -np.ones(cap, dtype=np.int64)
    best_thr = np.zeros(cap)
    for depth in range(max_depth + 1):
        for nd in range(frontier_lo, frontier_hi):
            cover[nd] = H[nd]
            best_gain[nd] = 0.0
            best_feat[nd] = -1
        if depth < max_depth:
            for c in range(cols.shape[0]):
                f = cols[c]
                for nd in range(frontier_lo, frontier_hi):
                    GL[nd] = 0.0
                    HL[nd] = 0.0
                    seen[nd] = False
                for k in range(n):
                    i = order[f, k]
                    nd = pos[i]
                    if nd < frontier_lo:
                        continue
                    x = X[i, f]
                    if seen[nd] and x > last[nd]:
                        hl = HL[nd]
                        hr = H[nd] - hl
                        if hl >= min_child_weight and hr >= min_child_weight:
                            gl = GL[nd]
                            gr = G[nd] - gl
                            gain = 0.5 * (gl * gl / (hl + lam) + gr * gr / (hr + lam)
                                          - G[nd] * G[nd] / (H[nd] + lam))
                            if gain > best_gain[nd]:
                                best_gain[nd] = gain
                                best_feat[nd] = f
                                t = 0.5 * (last[nd] + x)
                                if t <= last[nd]:
                                    t = x
                                best_thr[nd] = t
                    GL[nd] += g[i]
                    HL[nd] += h[i]
                    last[nd] = x
                    seen[nd] = True
        new_lo = n_nodes
        for nd in range(frontier_lo, frontier_hi):
            if best_feat[nd] >= 0 and best_gain[nd] > 1e-12:
                feat[nd] = best_feat[nd]
                thr[nd] = best_thr[nd]
                left[nd] = n_nodes
                right[nd] = n_nodes + 1
                n_nodes += 2
            else:
                value[nd] = -G[nd] / (H[nd] + lam)
        if n_nodes == new_lo:
            for i in range(n):
                pos[i] = -1
            break
        for i in range(n):
            nd = pos[i]
            if nd < frontier_lo:
                continue
            if feat[nd] >= 0:
                child = left[nd] if X[i, feat[nd]] < thr[nd] else right[nd]
                pos[i] = child
                G[child] += g[i]
                H[child] += h[i]
            else:
                pos[i] = -1
        frontier_lo = new_lo
        frontier_hi = n_nodes
    return feat[:n_nodes], thr[:n_nodes], left[:n_nodes], right[:n_nodes], cover[:n_nodes], value[:n_nodes]


def _logloss(y, margin, w):
    m = np.clip(margin, -MARGIN_CAP, MARGIN_CAP)
    return float(np.sum(w * (np.logaddexp(0.0, m) - y * m)) / np.sum(w))


def gbt_train(X, y, h: GbtHyperparams, seed=0, feature_names: Optional[Sequence[str]] = None) -> GbtModel:
    X = _check_matrix(X)
    y = np.asarray(y, dtype=np.float64).ravel()
    n, p = X.shape
    if n != len(y) or n < 2:
        raise ValidationError("X and y must have the same length >= 2")
    if not np.all((y == 0) | (y == 1)):
        raise ValidationError("labels must be binary")
    if y.min() == y.max():
        raise ValidationError("both classes must be present to train a boosted model")
    names = list(feature_names) if feature_names is not None else [f"f{j}" for j in range(p)]
    rng = np.random.default_rng(seed)
    order = np.ascontiguousarray(np.argsort(X, axis=0, kind="stable").T)
    prior = y.mean()
    base = math.log(prior / (1.0 - prior))
    w = np.where(y == 1, h.scale_pos_weight, 1.0)
    margin = np.full(n, base)
    trees, losses = [], [_logloss(y, margin, w)]
    n_rows = max(1, int(round(h.subsample * n)))
    n_cols = max(1, int(round(h.colsample * p)))
    for _ in range(h.n_trees):
        prob = _sigmoid(margin)
        g = w * (prob - y)
        hess = w * prob * (1.0 - prob)
        in_sample = np.zeros(n, dtype=np.bool_)
        if n_rows < n:
            in_sample[rng.choice(n, n_rows, replace=False)] = True
        else:
            in_sample[:] = True
        cols = np.sort(rng.choice(p, n_cols, replace=False)) if n_cols < p else np.arange(p)
        arrays = _grow_tree(X, order, g, hess, in_sample, cols.astype(np.int64),
                            h.max_depth, h.min_child_weight, h.l2_lambda)
        tree = Tree(*[np.array(a) for a in arrays])
        trees.append(tree)
        model_one = GbtModel([tree], 0.0, 1.0, names)
        margin = margin + h.learning_rate * model_one.margin(X)
        losses.append(_logloss(y, margin, w))
    return GbtModel(trees, base, h.learning_rate, names, asdict(h), losses)


def gbt_predict_proba(m: GbtModel, X) -> np.ndarray:
    return m.predict_proba(X)


def draw_candidates(space: dict, n_iter: int, rng: np.random.Generator) -> list[dict]:
    keys = sorted(space)
    out = []
    for _ in range(n_iter):
        out.append({k: space[k][int(rng.integers(len(space[k])))] for k in keys})
    return out


def _resolve(cand: dict, y, base: dict) -> GbtHyperparams:
    params = asdict(GbtHyperparams())
    params.update(base)
    params.update(cand)
    if params.get("scale_pos_weight") == "balanced":
        pos = float(np.sum(y == 1))
        params["scale_pos_weight"] = (len(y) - pos) / pos
    params["n_trees"] = int(params["n_trees"])
    params["max_depth"] = int(params["max_depth"])
    return GbtHyperparams(**params)


@dataclass
class SearchResult:
    best: GbtHyperparams
    candidates: list
    scores: list


def random_search_cv(X, y, space: dict, k: int = 3, n_iter: int = 20, seed=0,
                     base: Optional[dict] = None) -> SearchResult:
    """Randomized search maximizing mean held-out AUC over stratified k folds."""
    from .metrics import auc_roc

    if n_iter < 1:
        raise ValidationError("n_iter must be >= 1")
    X = _check_matrix(X)
    y = np.asarray(y, dtype=np.float64).ravel()
    base = dict(base or {})
    rng = np.random.default_rng(seed)
    cands = draw_candidates(space, n_iter, rng)
    folds = stratified_kfold(y, k, rng)
    fit_seeds = rng.integers(0, 2**31, size=k)
    memo = {}
    scores = []
    for cand in cands:
        key = json.dumps(cand, sort_keys=True)
        if key not in memo:
            aucs = []
            for f, test_idx in enumerate(folds):
                train_idx = np.setdiff1d(np.arange(len(y)), test_idx)
                ytr, yte = y[train_idx], y[test_idx]
                if ytr.min() == ytr.max() or yte.min() == yte.max():
                    continue
                hp = _resolve(cand, ytr, base)
                m = gbt_train(X[train_idx], ytr, hp, seed=int(fit_seeds[f]))
                aucs.append(auc_roc(yte, m.predict_proba(X[test_idx])))
            memo[key] = float(np.mean(aucs)) if aucs else math.nan
        scores.append(memo[key])
    valid = [i for i, s in enumerate(scores) if not math.isnan(s)]
    if not valid:
        raise ValidationError("every cross-validation fold was single-class")
    best_i = max(valid, key=lambda i: (scores[i], -i))
    return SearchResult(_resolve(cands[best_i], y, base), cands, scores)


@dataclass
class ShapAttribution:
    phi0: float
    phi: np.ndarray  # (n_samples, n_features), margin space


def tree_shap(m: GbtModel, X) -> ShapAttribution:
    """Path-dependent TreeSHAP, vectorized over samples, summed over trees."""
    X = _check_matrix(X, m.n_features)
    n = len(X)
    phi = np.zeros((n, m.n_features))
    phi0 = m.base_score
    for tree in m.trees:
        if np.any(tree.cover <= 0):
            raise ValidationError("tree has a node with zero cover; cannot attribute")
        scale = m.learning_rate
        leaves = tree.feature < 0
        phi0 += scale * float(np.sum(tree.cover[leaves] * tree.value[leaves]) / tree.cover[0])
        if tree.n_nodes == 1:
            continue
        _shap_recurse(tree, X, scale, phi, 0, _Path.empty(n), 1.0, np.ones(n), -1)
    return ShapAttribution(float(phi0), phi)


class _Path:
    """Unique-feature path: one column per element, sample-dependent one-fractions."""

    __slots__ = ("feat", "zero", "one", "w")

    def __init__(self, feat, zero, one, w):
        self.feat = feat
        self.zero = zero
        self.one = one
        self.w = w

    @classmethod
    def empty(cls, n):
        return cls([], [], np.empty((n, 0)), np.empty((n, 0)))

    def extend(self, pz, po, pi) -> "_Path":
        l = len(self.feat)
        n = self.w.shape[0]
        w = np.column_stack([self.w, np.full(n, 1.0 if l == 0 else 0.0)])
        for i in range(l - 1, -1, -1):
            w[:, i + 1] += po * w[:, i] * (i + 1) / (l + 1)
            w[:, i] = pz * w[:, i] * (l - i) / (l + 1)
        return _Path(self.feat + [pi], self.zero + [pz],
                     np.column_stack([self.one, po]), w)

    def unwind(self, k) -> "_Path":
        d = len(self.feat) - 1
        o = self.one[:, k]
        z = self.zero[k]
        nz = o != 0
        safe_o = np.where(nz, o, 1.0)
        w = self.w.copy()
        nxt = w[:, d].copy()
        for i in range(d - 1, -1, -1):
            tmp = w[:, i].copy()
            a = nxt * (d + 1) / ((i + 1) * safe_o)
            b = tmp * (d + 1) / (z * (d - i))
            w[:, i] = np.where(nz, a, b)
            nxt = np.where(nz, tmp - w[:, i] * z * (d - i) / (d + 1), nxt)
        keep = [j for j in range(d + 1) if j != k]
        return _Path([self.feat[j] for j in keep], [self.zero[j] for j in keep],
                     self.one[:, keep], w[:, :d])

    def unwound_sum(self, k) -> np.ndarray:
        d = len(self.feat) - 1
        o = self.one[:, k]
        z = self.zero[k]
        nz = o != 0
        safe_o = np.where(nz, o, 1.0)
        nxt = self.w[:, d].copy()
        tot_a = np.zeros_like(nxt)
        tot_b = np.zeros_like(nxt)
        for i in range(d - 1, -1, -1):
            tmp = nxt / ((i + 1) * safe_o)
            tot_a += tmp
            nxt = self.w[:, i] - tmp * z * (d - i)
            tot_b += self.w[:, i] / (z * (d - i))
        return np.where(nz, tot_a, tot_b) * (d + 1)


def _shap_recurse(tree: Tree, X, scale, phi, node, path: _Path, pz, po, pi):
    path = path.extend(pz, po, pi)
    f = tree.feature[node]
    if f < 0:
        v = scale * tree.value[node]
        for k in range(1, len(path.feat)):
            w = path.unwound_sum(k)
            phi[:, path.feat[k]] += w * (path.one[:, k] - path.zero[k]) * v
        return
    lc, rc = tree.left[node], tree.right[node]
    goes_left = (X[:, f] < tree.threshold[node]).astype(np.float64)
    iz, io = 1.0, np.ones(X.shape[0])
    if f in path.feat[1:]:
        k = path.feat.index(f, 1)
        iz, io = path.zero[k], path.one[:, k]
        path = path.unwind(k)
    cover = tree.cover[node]
    _shap_recurse(tree, X, scale, phi, lc, path, iz * tree.cover[lc] / cover, io * goes_left, f)
    _shap_recurse(tree, X, scale, phi, rc, path, iz * tree.cover[rc] / cover, io * (1.0 - goes_left), f)
