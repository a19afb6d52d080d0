"""Tile-parallel inference, IDW merging of overlapping tiles, Jenks breaks and
bivariate classification."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigurationError, DegenerateInputError, DimensionError, ValidationError
from .gridio import Raster, read_ascii_grid, write_ascii_grid
from .moe import GateNetwork, moe_predict
from .mvgnet import BetaCalibrator, MvgNet, ef_predict
from .partition import ComputationalUnit, cell_window
from .trees import GbtModel

logger = logging.getLogger(__name__)

MODELS = ("ef", "lf", "moe")
HAZARDS = ("flood", "landslide")
IDW_EPS = 1e-6


def model_layers(model: str) -> tuple[str, ...]:
    # LF has no covariance head; MoE reports EF's joint uncertainty
    return ("s_f", "s_l") if model == "lf" else ("s_f", "s_l", "logdet", "rho")


@dataclass
class ZoneModelBundle:
    zone: int
    features: list
    mean: np.ndarray
    std: np.ndarray
    lf: dict = field(default_factory=dict)   # hazard -> GbtModel
    ef: Optional[MvgNet] = None
    cal_f: Optional[BetaCalibrator] = None
    cal_l: Optional[BetaCalibrator] = None
    gate: Optional[GateNetwork] = None

    def standardize(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.std

    def to_dict(self) -> dict:
        return {
            "zone": self.zone, "features": self.features,
            "mean": self.mean.tolist(), "std": self.std.tolist(),
            "lf": {h: m.to_dict() for h, m in self.lf.items()},
            "ef": self.ef.to_dict() if self.ef is not None else None,
            "cal_f": self.cal_f.to_dict() if self.cal_f is not None else None,
            "cal_l": self.cal_l.to_dict() if self.cal_l is not None else None,
            "gate": self.gate.to_dict() if self.gate is not None else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ZoneModelBundle":
        return cls(
            int(d["zone"]), list(d["features"]),
            np.array(d["mean"], dtype=np.float64), np.array(d["std"], dtype=np.float64),
            {h: GbtModel.from_dict(m) for h, m in d["lf"].items()},
            MvgNet.from_dict(d["ef"]) if d.get("ef") else None,
            BetaCalibrator.from_dict(d["cal_f"]) if d.get("cal_f") else None,
            BetaCalibrator.from_dict(d["cal_l"]) if d.get("cal_l") else None,
            GateNetwork.from_dict(d["gate"]) if d.get("gate") else None,
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "ZoneModelBundle":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def available(self) -> list[str]:
        out = []
        if self.ef is not None:
            out.append("ef")
        if len(self.lf) == 2:
            out.append("lf")
        if self.gate is not None and "ef" in out and "lf" in out:
            out.append("moe")
        return out


def predict_bundle(b: ZoneModelBundle, X, models=MODELS) -> dict:
    """Evaluate the requested models on raw feature rows (columns = b.features).

    Returns {model: {layer: (n,) array}}.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != len(b.features):
        raise DimensionError(f"zone {b.zone}: expected {len(b.features)} feature columns")
    missing = [m for m in models if m not in b.available()]
    if missing:
        raise ConfigurationError(f"zone {b.zone}: no trained model(s) {missing}")
    out = {}
    need_ef = "ef" in models or "moe" in models
    need_lf = "lf" in models or "moe" in models
    if need_ef:
        e = ef_predict(b.ef, b.cal_f, b.cal_l, b.standardize(X))
        ef = {"s_f": e.s[:, 0], "s_l": e.s[:, 1], "logdet": e.logdet, "rho": e.rho}
    if need_lf:
        lf = {"s_f": b.lf["flood"].predict_proba(X), "s_l": b.lf["landslide"].predict_proba(X)}
    if "ef" in models:
        out["ef"] = ef
    if "lf" in models:
        out["lf"] = lf
    if "moe" in models:
        z = np.column_stack([lf["s_f"], lf["s_l"], ef["s_f"], ef["s_l"]])
        p = moe_predict(b.gate, z) if len(z) else np.empty((0, 2))
        out["moe"] = {"s_f": p[:, 0], "s_l": p[:, 1], "logdet": ef["logdet"], "rho": ef["rho"]}
    return out


@dataclass
class TilePrediction:
    """Per-model layers over a unit's padded window of the reference grid.

    ``row0``/``col0`` locate the window in the reference grid; cells with no
    prediction hold NaN.
    """

    unit_id: int
    row0: int
    col0: int
    layers: dict  # model -> layer -> 2-D array

    @property
    def shape(self) -> tuple[int, int]:
        first = next(iter(self.layers.values()))
        return next(iter(first.values())).shape


def _tile_task(unit: ComputationalUnit, bundles: dict, factors: dict, zones: Raster, models) -> TilePrediction:
    rows, cols = cell_window(unit.padded, zones)
    zwin = zones.values[rows, cols]
    shape = zwin.shape
    layers = {m: {name: np.full(shape, np.nan) for name in model_layers(m)} for m in models}
    zvalid = zwin != zones.nodata
    for z in np.unique(zwin[zvalid]):
        z = int(z)
        b = bundles.get(z)
        if b is None:
            raise ConfigurationError(f"no model bundle for zone {z}")
        mask = zvalid & (zwin == z)
        X = np.empty((int(mask.sum()), len(b.features)))
        for j, name in enumerate(b.features):
            if name not in factors:
                raise ConfigurationError(f"zone {z}: factor raster '{name}' missing")
            f = factors[name]
            X[:, j] = f.values[rows, cols][mask]
            mask_f = f.values[rows, cols][mask] == f.nodata
            X[mask_f, j] = np.nan
        ok = np.all(np.isfinite(X), axis=1)
        if not ok.any():
            continue
        pred = predict_bundle(b, X[ok], models)
        idx = np.flatnonzero(mask.ravel())[ok]
        for m in models:
            for name, v in pred[m].items():
                layers[m][name].ravel()[idx] = v
    return TilePrediction(unit.id, rows.start, cols.start, layers)


def predict_tiles(bundles: dict, units, factors: dict, zones: Raster, models=MODELS,
                  workers: int = 1) -> list[TilePrediction]:
    """Predict every unit; results are independent of processing order."""
    for f in factors.values():
        if not f.same_grid(zones):
            raise ValidationError("factor rasters must share the zone grid")
    models = tuple(models)
    if workers > 1 and len(units) > 1:
        from joblib import Parallel, delayed
        tiles = Parallel(n_jobs=workers)(
            delayed(_tile_task)(u, bundles, factors, zones, models) for u in units)
    else:
        tiles = [_tile_task(u, bundles, factors, zones, models) for u in units]
    return sorted(tiles, key=lambda t: t.unit_id)


def idw_merge(tiles, units, grid: Raster) -> dict:
    """Blend overlapping tiles with weights 1 / (d^2 + eps), d measured from each
    cell center to the tile's padded-rectangle center.

    Cells covered by a single tile, or by tiles that agree exactly, take the
    tile value unchanged. Returns {model: {layer: Raster}}.
    """
    by_id = {u.id: u for u in units}
    tiles = sorted(tiles, key=lambda t: t.unit_id)
    if not tiles:
        raise ValidationError("no tiles to merge")
    xc, yc = grid.cell_centers()
    out = {}
    for model, first in tiles[0].layers.items():
        out[model] = {}
        for name in first:
            num = np.zeros(grid.shape)
            den = np.zeros(grid.shape)
            cnt = np.zeros(grid.shape, dtype=np.int64)
            lo = np.full(grid.shape, np.inf)
            hi = np.full(grid.shape, -np.inf)
            for t in tiles:
                v = t.layers[model][name]
                nr, nc = v.shape
                rs, cs = slice(t.row0, t.row0 + nr), slice(t.col0, t.col0 + nc)
                cx, cy = by_id[t.unit_id].padded.center
                d2 = (xc[cs][None, :] - cx) ** 2 + (yc[rs][:, None] - cy) ** 2
                w = 1.0 / (d2 + IDW_EPS)
                ok = np.isfinite(v)
                vz = np.where(ok, v, 0.0)
                num[rs, cs] += np.where(ok, w * vz, 0.0)
                den[rs, cs] += np.where(ok, w, 0.0)
                cnt[rs, cs] += ok
                lo[rs, cs] = np.where(ok, np.minimum(lo[rs, cs], vz), lo[rs, cs])
                hi[rs, cs] = np.where(ok, np.maximum(hi[rs, cs], vz), hi[rs, cs])
            merged = np.full(grid.shape, np.nan)
            covered = cnt > 0
            merged[covered] = np.clip(num[covered] / den[covered], lo[covered], hi[covered])
            agree = covered & (lo == hi)
            merged[agree] = lo[agree]
            out[model][name] = grid.with_values(merged)
    return out


def tile_filename(model: str, unit_id: int, layer: str) -> str:
    return f"{model}_{unit_id}_{layer}.asc"


def write_tiles(tiles, grid: Raster, outdir) -> list[Path]:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = []
    top = grid.yll + grid.nrows * grid.cellsize
    for t in tiles:
        nr, nc = t.shape
        xll = grid.xll + t.col0 * grid.cellsize
        yll = top - (t.row0 + nr) * grid.cellsize
        for model, layers in t.layers.items():
            for name, v in layers.items():
                r = Raster(np.where(np.isfinite(v), v, grid.nodata), xll, yll, grid.cellsize, grid.nodata)
                p = outdir / tile_filename(model, t.unit_id, name)
                write_ascii_grid(r, p)
                paths.append(p)
    return paths


def read_tiles(units, grid: Raster, indir, models=MODELS) -> list[TilePrediction]:
    indir = Path(indir)
    top = grid.yll + grid.nrows * grid.cellsize
    tiles = []
    for u in units:
        layers = {}
        row0 = col0 = None
        for model in models:
            layers[model] = {}
            for name in model_layers(model):
                r = read_ascii_grid(indir / tile_filename(model, u.id, name))
                layers[model][name] = r.masked()
                col0 = int(round((r.xll - grid.xll) / grid.cellsize))
                row0 = int(round((top - (r.yll + r.nrows * r.cellsize)) / grid.cellsize))
        tiles.append(TilePrediction(u.id, row0, col0, layers))
    return tiles


@dataclass
class JenksBreaks:
    thresholds: list
    objective: float
    n_values: int

    def to_dict(self) -> dict:
        return {"thresholds": self.thresholds, "objective": self.objective, "n_values": self.n_values}

    @classmethod
    def from_dict(cls, d: dict) -> "JenksBreaks":
        return cls(list(d["thresholds"]), float(d["objective"]), int(d["n_values"]))


def within_ssd(x_sorted, starts) -> float:
    """Sum of within-class squared deviations for classes starting at ``starts``."""
    bounds = [0] + [int(s) for s in starts] + [len(x_sorted)]
    total = 0.0
    for a, b in zip(bounds[:-1], bounds[1:]):
        seg = x_sorted[a:b]
        total += float(((seg - seg.mean()) ** 2).sum())
    return total


def fisher_jenks(x_sorted, k: int) -> tuple[list[int], float]:
    """Exact optimal k-class partition of sorted values.

    Returns the start index of classes 1..k-1 and the objective. Splits are
    only placed between distinct values.
    """
    x = np.asarray(x_sorted, dtype=np.float64)
    n = len(x)
    s1 = np.concatenate([[0.0], np.cumsum(x)])
    s2 = np.concatenate([[0.0], np.cumsum(x * x)])
    splittable = np.concatenate([[False], x[1:] > x[:-1]])
    # D[c, i]: best cost for x[0..i] in c+1 classes
    D = np.full((k, n), np.inf)
    back = np.zeros((k, n), dtype=np.int64)
    i_all = np.arange(n)
    D[0] = s2[i_all + 1] - s1[i_all + 1] ** 2 / (i_all + 1)
    for c in range(1, k):
        for i in range(c, n):
            j = np.arange(c, i + 1)
            cnt = i + 1 - j
            seg = s2[i + 1] - s2[j] - (s1[i + 1] - s1[j]) ** 2 / cnt
            cost = np.where(splittable[j], D[c - 1, j - 1] + np.maximum(seg, 0.0), np.inf)
            a = int(np.argmin(cost))
            D[c, i], back[c, i] = cost[a], j[a]
    starts = []
    i = n - 1
    for c in range(k - 1, 0, -1):
        j = int(back[c, i])
        starts.append(j)
        i = j - 1
    starts.reverse()
    return starts, within_ssd(x, starts)


def jenks_breaks(values, k: int = 5, sample_cap: int = 10000, seed=0) -> JenksBreaks:
    """Natural breaks on (at most ``sample_cap``) finite values.

    Thresholds are the lowest value of each class above the first.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    v = v[np.isfinite(v)]
    if k < 1:
        raise ValidationError("k must be >= 1")
    if len(v) > sample_cap:
        rng = np.random.default_rng(seed)
        v = v[np.sort(rng.choice(len(v), sample_cap, replace=False))]
    if len(np.unique(v)) < k:
        raise DegenerateInputError(f"need at least {k} distinct values for {k} classes")
    x = np.sort(v)
    if k == 1:
        return JenksBreaks([], within_ssd(x, []), len(x))
    starts, obj = fisher_jenks(x, k)
    return JenksBreaks([float(x[j]) for j in starts], obj, len(x))


def classify_values(values, thresholds) -> np.ndarray:
    """Class index = number of thresholds <= value."""
    return np.searchsorted(np.asarray(thresholds, dtype=np.float64), values, side="right")


def classify_bivariate(s_f: Raster, s_l: Raster, breaks_f, breaks_l, k: int = 5) -> Raster:
    tf = breaks_f.thresholds if isinstance(breaks_f, JenksBreaks) else list(breaks_f)
    tl = breaks_l.thresholds if isinstance(breaks_l, JenksBreaks) else list(breaks_l)
    if len(tf) != k - 1 or len(tl) != k - 1:
        raise ValidationError(f"expected {k - 1} thresholds per hazard")
    if not s_f.same_grid(s_l):
        raise ValidationError("flood and landslide rasters are on different grids")
    ok = s_f.valid & s_l.valid
    code = np.full(s_f.shape, np.nan)
    code[ok] = k * classify_values(s_f.values[ok], tf) + classify_values(s_l.values[ok], tl)
    return s_f.with_values(code)
