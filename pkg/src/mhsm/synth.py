"""Synthetic study areas with known susceptibility and label dependence.

Factor rasters are sums of seeded Gaussian bumps plus white noise. Zones are
Voronoi cells of random sites, with one corner of the extent left outside the
study area. Each zone has its own linear + quadratic logit per hazard, and
labels are drawn from a Gaussian-copula Bernoulli with latent correlation
``rho_star``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit
from scipy.stats import multivariate_normal, norm

from .config import SynthConfig, substream
from .errors import ValidationError
from .gridio import SamplePoint, Raster, write_ascii_grid, write_points_csv

CONTINUOUS = ("elevation", "slope", "twi", "dist_river", "rainfall", "ndvi", "curvature")
COLLINEAR = "elevation_dem2"   # near-duplicate of elevation
CATEGORICAL = "lulc"
N_LULC = 4
# (offset, scale) mapping a standardized field to plausible units
UNITS = {
    "elevation": (800.0, 400.0), "slope": (15.0, 7.0), "twi": (8.0, 2.5),
    "dist_river": (2000.0, 900.0), "rainfall": (2500.0, 600.0), "ndvi": (0.5, 0.15),
    "curvature": (0.0, 1.0),
}
# base effect of each standardized factor on the flood / landslide logit
BASE = {
    "flood": {"elevation": -1.0, "twi": 0.8, "dist_river": -0.8, "rainfall": 0.5, "slope": -0.3},
    "landslide": {"slope": 1.0, "rainfall": 0.6, "elevation": 0.4, "ndvi": -0.6, "curvature": 0.4},
}
HAZARDS = ("flood", "landslide")


def factor_names() -> list[str]:
    return list(CONTINUOUS) + [COLLINEAR, CATEGORICAL]


@dataclass
class ZoneCoefficients:
    linear: dict        # factor -> coefficient (standardized units)
    quad_factor: str
    quad: float
    lulc: list          # offset per lulc code 1..N_LULC
    intercept: float = 0.0


@dataclass
class SynthTruth:
    rho_star: float
    signal_scale: float
    prevalence: float
    mean: dict
    std: dict
    zones: dict = field(default_factory=dict)  # str(zone) -> hazard -> ZoneCoefficients
    shortfall: dict = field(default_factory=dict)
    n_inventory: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthTruth":
        zones = {z: {h: ZoneCoefficients(**c) for h, c in hz.items()} for z, hz in d["zones"].items()}
        return cls(d["rho_star"], d["signal_scale"], d["prevalence"], d["mean"], d["std"], zones,
                   d.get("shortfall", {}), d.get("n_inventory", {}))


@dataclass
class SynthArea:
    factors: dict           # name -> Raster
    zones: Raster
    labels: dict            # hazard -> Raster of 0/1
    truth_p: dict           # hazard -> Raster of true probabilities
    inventory: list         # SamplePoint
    truth: SynthTruth


def bump_field(xc, yc, n_bumps: int, scale_m: float, rng) -> np.ndarray:
    """Standardized sum of Gaussian bumps evaluated on the cell-center mesh."""
    X, Y = np.meshgrid(xc, yc)
    f = np.zeros_like(X)
    for _ in range(n_bumps):
        cx = rng.uniform(xc[0], xc[-1])
        cy = rng.uniform(yc[-1], yc[0])
        s = rng.uniform(0.05, 0.2) * scale_m
        a = rng.normal()
        # separable exponentials keep this cheap
        f += a * np.exp(-((yc - cy) ** 2) / (2 * s * s))[:, None] * np.exp(-((xc - cx) ** 2) / (2 * s * s))[None, :]
    sd = f.std()
    return (f - f.mean()) / (sd if sd > 0 else 1.0)


def voronoi_zones(xc, yc, n_zones: int, rng) -> np.ndarray:
    sites = np.column_stack([rng.uniform(xc[0], xc[-1], n_zones), rng.uniform(yc[-1], yc[0], n_zones)])
    X, Y = np.meshgrid(xc, yc)
    d2 = (X[..., None] - sites[:, 0]) ** 2 + (Y[..., None] - sites[:, 1]) ** 2
    return np.argmin(d2, axis=-1) + 1


def linear_predictor(z: dict, lulc, c: ZoneCoefficients, signal_scale: float) -> np.ndarray:
    """Zone logit minus intercept; ``z`` holds standardized factor arrays."""
    eta = np.zeros(np.shape(lulc), dtype=np.float64)
    # fixed order so a reloaded truth file reproduces the sum bit for bit
    for name in sorted(c.linear):
        eta = eta + c.linear[name] * z[name]
    eta = eta + c.quad * (z[c.quad_factor] ** 2 - 1.0)
    codes = np.clip(np.asarray(lulc, dtype=np.int64), 1, N_LULC) - 1
    eta = eta + np.asarray(c.lulc)[codes]
    return signal_scale * eta


def fit_intercept(eta, target: float, tol: float = 1e-12) -> float:
    """Bisect c so that mean(sigmoid(eta + c)) = target."""
    if not 0 < target < 1:
        raise ValidationError("prevalence must lie in (0, 1)")
    lo, hi = -60.0, 60.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if expit(eta + mid).mean() < target:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol:
            break
    return 0.5 * (lo + hi)


def true_susceptibility(factors: dict, zones: Raster, truth: SynthTruth) -> dict:
    """Recompute the true probability rasters from factor rasters and stored coefficients."""
    zv = zones.values
    ok = zones.valid.copy()
    for f in factors.values():
        ok &= f.valid
    z = {n: (factors[n].values - truth.mean[n]) / truth.std[n] for n in CONTINUOUS}
    lulc = factors[CATEGORICAL].values
    out = {}
    for h in HAZARDS:
        p = np.full(zones.shape, np.nan)
        for key, coefs in truth.zones.items():
            m = ok & (zv == int(key))
            if not m.any():
                continue
            c = coefs[h]
            zz = {n: v[m] for n, v in z.items()}
            p[m] = expit(linear_predictor(zz, lulc[m], c, truth.signal_scale) + c.intercept)
        out[h] = zones.with_values(p)
    return out


def copula_labels(p_f, p_l, rho: float, rng) -> tuple[np.ndarray, np.ndarray]:
    """y_k = 1[Phi(e_k) < p_k] with (e_1, e_2) standard bivariate normal, corr rho."""
    n = np.size(p_f)
    e1 = rng.standard_normal(n)
    e2 = rho * e1 + math.sqrt(1.0 - rho * rho) * rng.standard_normal(n)
    y_f = (norm.cdf(e1) < np.ravel(p_f)).astype(np.int64)
    y_l = (norm.cdf(e2) < np.ravel(p_l)).astype(np.int64)
    return y_f.reshape(np.shape(p_f)), y_l.reshape(np.shape(p_l))


def copula_label_correlation(p_f: float, p_l: float, rho: float) -> float:
    """Pearson correlation of the two Bernoulli labels implied by the copula."""
    p11 = multivariate_normal(mean=[0, 0], cov=[[1, rho], [rho, 1]]).cdf([norm.ppf(p_f), norm.ppf(p_l)])
    return float((p11 - p_f * p_l) / math.sqrt(p_f * (1 - p_f) * p_l * (1 - p_l)))


def residual_correlation(y, p) -> float:
    """Correlation of standardized label residuals given the true probabilities."""
    y = np.asarray(y, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    r = (y - p) / np.sqrt(p * (1 - p))
    return float(np.corrcoef(r[:, 0], r[:, 1])[0, 1])


def _zone_coefficients(rng, n_zones: int) -> dict:
    names = list(CONTINUOUS)
    zones = {}
    for z in range(1, n_zones + 1):
        zones[str(z)] = {}
        for h in HAZARDS:
            lin = {}
            for n in names:
                base = BASE[h].get(n, 0.0)
                lin[n] = float(base * rng.uniform(0.5, 1.5) + rng.normal(0.0, 0.2))
            zones[str(z)][h] = ZoneCoefficients(
                linear=lin,
                quad_factor=str(names[rng.integers(len(names))]),
                quad=float(rng.choice([-1.0, 1.0]) * rng.uniform(0.2, 0.5)),
                lulc=[float(v) for v in rng.normal(0.0, 0.3, N_LULC)],
            )
    return zones


def generate(spec: SynthConfig, seed: int = 0) -> SynthArea:
    if spec.n_zones < 1:
        raise ValidationError("n_zones must be >= 1")
    if not abs(spec.rho_star) < 1:
        raise ValidationError("rho_star must satisfy |rho_star| < 1")
    if not (spec.width_m > 0 and spec.height_m > 0 and spec.cellsize > 0):
        raise ValidationError("extent and cellsize must be positive")
    seed = spec.seed if spec.seed is not None else seed
    ncols = int(round(spec.width_m / spec.cellsize))
    nrows = int(round(spec.height_m / spec.cellsize))
    if ncols < 2 or nrows < 2:
        raise ValidationError("synthetic grid needs at least 2x2 cells")
    cs = spec.cellsize
    xc = (np.arange(ncols) + 0.5) * cs
    yc = (nrows - np.arange(nrows) - 0.5) * cs
    scale = min(spec.width_m, spec.height_m)

    # study area: everything except the top-right corner triangle
    X, Y = np.meshgrid(xc, yc)
    inside = (spec.width_m - X) + (spec.height_m - Y) >= 0.2 * scale

    std_fields = {}
    for name in CONTINUOUS:
        rng = substream(seed, f"synth:field:{name}")
        f = bump_field(xc, yc, spec.n_bumps, scale, rng)
        std_fields[name] = f + spec.noise_std * rng.standard_normal(f.shape)
    rng = substream(seed, f"synth:field:{COLLINEAR}")
    extra = bump_field(xc, yc, spec.n_bumps, scale, rng)
    dem2 = 0.95 * std_fields["elevation"] + 0.3 * extra + spec.noise_std * rng.standard_normal(extra.shape)
    rng = substream(seed, f"synth:field:{CATEGORICAL}")
    lulc_f = bump_field(xc, yc, spec.n_bumps, scale, rng)
    lulc = 1 + np.searchsorted(np.quantile(lulc_f, [0.25, 0.5, 0.75]), lulc_f, side="right")

    values = {n: UNITS[n][0] + UNITS[n][1] * std_fields[n] for n in CONTINUOUS}
    values[COLLINEAR] = UNITS["elevation"][0] + UNITS["elevation"][1] * dem2
    values[CATEGORICAL] = lulc.astype(np.float64)
    factors = {n: Raster(v, 0.0, 0.0, cs) for n, v in values.items()}

    zone_ids = voronoi_zones(xc, yc, spec.n_zones, substream(seed, "synth:zones")).astype(np.float64)
    zones = Raster(np.where(inside, zone_ids, -9999.0), 0.0, 0.0, cs)

    mean = {n: float(values[n][inside].mean()) for n in CONTINUOUS}
    std = {n: float(values[n][inside].std()) for n in CONTINUOUS}
    truth = SynthTruth(spec.rho_star, spec.signal_scale, spec.prevalence, mean, std,
                       _zone_coefficients(substream(seed, "synth:coefficients"), spec.n_zones))
    z = {n: (values[n] - mean[n]) / std[n] for n in CONTINUOUS}
    for key, coefs in truth.zones.items():
        m = inside & (zone_ids == int(key))
        if not m.any():
            continue
        for h in HAZARDS:
            eta = linear_predictor({n: v[m] for n, v in z.items()}, lulc[m], coefs[h], spec.signal_scale)
            coefs[h].intercept = fit_intercept(eta, spec.prevalence)
    truth_p = true_susceptibility(factors, zones, truth)

    pf = truth_p["flood"].values
    pl = truth_p["landslide"].values
    y_f, y_l = copula_labels(np.where(inside, pf, 0.0), np.where(inside, pl, 0.0), spec.rho_star,
                             substream(seed, "synth:labels"))
    labels = {"flood": zones.with_values(np.where(inside, y_f, np.nan)),
              "landslide": zones.with_values(np.where(inside, y_l, np.nan))}

    rng = substream(seed, "synth:inventory")
    chosen = set()
    for h, y in (("flood", y_f), ("landslide", y_l)):
        cells = np.flatnonzero((inside & (y == 1)).ravel())
        take = min(spec.n_inventory, len(cells))
        truth.shortfall[h] = take < spec.n_inventory
        truth.n_inventory[h] = int(take)
        chosen.update(int(c) for c in rng.choice(cells, take, replace=False))
    inventory = []
    for c in sorted(chosen):
        r, k = divmod(c, ncols)
        inventory.append(SamplePoint(float(xc[k]), float(yc[r]), int(y_f.flat[c]), int(y_l.flat[c])))
    return SynthArea(factors, zones, labels, truth_p, inventory, truth)


def write_area(area: SynthArea, outdir) -> dict:
    """Write the area in the standard formats; returns the data-block paths."""
    outdir = Path(outdir)
    (outdir / "factors").mkdir(parents=True, exist_ok=True)
    (outdir / "labels").mkdir(exist_ok=True)
    (outdir / "truth").mkdir(exist_ok=True)
    paths = {"factors": {}, "label_rasters": {}}
    for name, r in area.factors.items():
        p = outdir / "factors" / f"{name}.asc"
        write_ascii_grid(r, p)
        paths["factors"][name] = str(p)
    write_ascii_grid(area.zones, outdir / "zones.asc")
    paths["zones"] = str(outdir / "zones.asc")
    for h, r in area.labels.items():
        write_ascii_grid(r, outdir / "labels" / f"{h}.asc")
        paths["label_rasters"][h] = str(outdir / "labels" / f"{h}.asc")
    for h, r in area.truth_p.items():
        write_ascii_grid(r, outdir / "truth" / f"p_{h}.asc")
    write_points_csv(area.inventory, outdir / "inventory.csv")
    paths["inventory"] = str(outdir / "inventory.csv")
    paths["categorical"] = [CATEGORICAL]
    (outdir / "truth.json").write_text(json.dumps(area.truth.to_dict(), indent=1, sort_keys=True) + "\n")
    return paths


def load_truth(path) -> SynthTruth:
    return SynthTruth.from_dict(json.loads(Path(path).read_text()))
