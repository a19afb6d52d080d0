"""Stage implementations behind the command-line interface.

Every stage writes into its own directory under the output root together with
a ``manifest.json`` holding the config digest, the seed, the options that
shaped the run and sha256 hashes of inputs and outputs. A stage whose manifest
still matches is skipped.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import synth as synthmod
from .config import RunConfig, subseed, substream
from .errors import DegenerateInputError, StageError, ValidationError
from .featsel import FeatureReport, select_features
from .geodetector import detector_suite
from .gridio import (Raster, SamplePoint, SampleTable, default_bivariate_palette, read_ascii_grid,
                     read_points_csv, render_class_ppm, write_ascii_grid, write_points_csv, write_ppm)
from .metrics import auc_roc, brier, confusion_metrics, jaccard_high, macro_average, mh_density
from .moe import GateNetwork, moe_train
from .mosaic import (HAZARDS, MODELS, ZoneModelBundle, classify_bivariate, idw_merge, jenks_breaks,
                     JenksBreaks, model_layers, predict_bundle, predict_tiles, read_tiles, write_tiles)
from .mvgnet import MvgNet, beta_calibrate_fit, ef_predict, mvg_train, sigmoid
from .partition import (attach_zone_ids, build_units, raster_extent, read_tile_index, write_tile_index,
                        assign_zones)
from .sampling import (kde_augment, kde_fit, negative_sample, ocsvm_fit, stratified_split)
from .trees import GbtHyperparams, gbt_train, random_search_cv

logger = logging.getLogger(__name__)

STAGE_DIRS = {
    "synth": "synth", "partition": "partition", "augment": "augment", "select-features": "features",
    "train": "models", "predict": "predict", "merge": "merge", "classify": "classify",
    "evaluate": "evaluate", "geodetector": "geodetector", "report": "report",
}
STAGE_ORDER = list(STAGE_DIRS)
MANIFEST = "manifest.json"
METRIC_FIELDS = ("auc", "brier", "accuracy", "precision", "recall", "f1", "fpr")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def write_csv(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(v) for v in r])


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return "" if math.isnan(v) else repr(float(v))
    return v


@dataclass
class DataPaths:
    factors: dict
    zones: Path
    inventory: Path
    label_rasters: Optional[dict]
    categorical: list


@dataclass
class Context:
    cfg: RunConfig
    out: Path
    models: tuple = MODELS
    zones: Optional[tuple] = None
    force: bool = False
    _cache: dict = field(default_factory=dict)

    def dir(self, stage: str) -> Path:
        return self.out / STAGE_DIRS[stage]

    def rel(self, p: Path) -> str:
        p = Path(p)
        try:
            return p.resolve().relative_to(self.out.resolve()).as_posix()
        except ValueError:
            return str(p)

    @property
    def data(self) -> DataPaths:
        cfg = self.cfg
        if cfg.data is not None:
            d = cfg.data
            labels = {h: cfg.resolve(p) for h, p in d.label_rasters.items()} if d.label_rasters else None
            return DataPaths({n: cfg.resolve(p) for n, p in d.factors.items()}, cfg.resolve(d.zones),
                             cfg.resolve(d.inventory), labels, list(d.categorical))
        root = self.out / "synth"
        return DataPaths({n: root / "factors" / f"{n}.asc" for n in synthmod.factor_names()},
                         root / "zones.asc", root / "inventory.csv",
                         {h: root / "labels" / f"{h}.asc" for h in HAZARDS}, [synthmod.CATEGORICAL])

    def raster(self, path) -> Raster:
        key = ("raster", str(path))
        if key not in self._cache:
            self._cache[key] = read_ascii_grid(path)
        return self._cache[key]

    def factors(self) -> dict:
        rasters = {n: self.raster(p) for n, p in self.data.factors.items()}
        zones = self.raster(self.data.zones)
        for n, r in rasters.items():
            if not r.same_grid(zones):
                raise ValidationError(f"factor raster '{n}' is not on the zone grid")
        return rasters

    def seed(self, name: str) -> int:
        return subseed(self.cfg.seed, name)

    def zone_selected(self, z: int) -> bool:
        return self.zones is None or z in self.zones


# ---------------------------------------------------------------- manifests

def _require(ctx: Context, paths) -> list[Path]:
    out = []
    for p in paths:
        p = Path(p)
        if not p.exists():
            raise StageError(f"missing prerequisite artifact: {ctx.rel(p)}")
        out.append(p)
    return out


def _stage_files(d: Path) -> list[Path]:
    return sorted(p for p in d.rglob("*") if p.is_file() and p.name != MANIFEST)


def _manifest_key(ctx: Context, stage: str, inputs) -> dict:
    return {
        "stage": stage,
        "config_digest": ctx.cfg.digest(),
        "seed": ctx.cfg.seed,
        "options": {"models": list(ctx.models), "zones": None if ctx.zones is None else list(ctx.zones)},
        "inputs": {ctx.rel(p): sha256_file(p) for p in sorted(inputs, key=lambda q: ctx.rel(q))},
    }


def _up_to_date(ctx: Context, stage: str, key: dict) -> bool:
    path = ctx.dir(stage) / MANIFEST
    if ctx.force or not path.exists():
        return False
    try:
        old = json.loads(path.read_text())
    except json.JSONDecodeError:
        return False
    if any(old.get(k) != v for k, v in key.items()):
        return False
    for rel, digest in old.get("outputs", {}).items():
        p = ctx.out / rel
        if not p.exists() or sha256_file(p) != digest:
            return False
    return True


def run_stage(ctx: Context, stage: str) -> str:
    """Run one stage unless its manifest shows it is current. Returns 'ran' or 'up-to-date'."""
    if stage not in STAGES:
        raise StageError(f"unknown stage {stage!r}")
    inputs_fn, body = STAGES[stage]
    inputs = _require(ctx, inputs_fn(ctx))
    key = _manifest_key(ctx, stage, inputs)
    if _up_to_date(ctx, stage, key):
        logger.info("%s: up to date", stage)
        return "up-to-date"
    d = ctx.dir(stage)
    d.mkdir(parents=True, exist_ok=True)
    body(ctx)
    ctx._cache.clear()
    key["outputs"] = {ctx.rel(p): sha256_file(p) for p in _stage_files(d)}
    write_json(d / MANIFEST, key)
    return "ran"


# ---------------------------------------------------------------- stages

def _in_synth(ctx):
    if ctx.cfg.synth is None:
        raise StageError("synth stage needs a 'synth' block in the config")
    return []


def _synth(ctx):
    area = synthmod.generate(ctx.cfg.synth, ctx.cfg.seed)
    synthmod.write_area(area, ctx.dir("synth"))


def _in_partition(ctx):
    return [ctx.data.zones]


def _partition(ctx):
    zones = ctx.raster(ctx.data.zones)
    units = build_units(raster_extent(zones), ctx.cfg.tile_size_m, ctx.cfg.overlap_m)
    write_tile_index(attach_zone_ids(units, zones), ctx.dir("partition") / "tile_index.json")


def _in_augment(ctx):
    d = ctx.data
    return [d.inventory, d.zones, *d.factors.values(), *(d.label_rasters or {}).values()]


def _augment(ctx):
    cfg, sc = ctx.cfg, ctx.cfg.sampling
    d = ctx.data
    zones = ctx.raster(d.zones)
    factors = ctx.factors()
    inv = SampleTable.from_points(read_points_csv(d.inventory))
    if len(inv) == 0:
        raise ValidationError("inventory is empty")

    def accept(pts):
        return np.isfinite(zones.sample(pts[:, 0], pts[:, 1]))

    report = {"hazards": {}}
    positives = {}
    for h, hazard in enumerate(HAZARDS):
        pts = inv.xy[inv.labels[:, h] == 1]
        if len(pts) < 2:
            raise ValidationError(f"inventory has fewer than two {hazard} points")
        kde = kde_fit(pts)
        target = max(len(pts), int(round(sc.augment_factor * len(pts))))
        res = kde_augment(kde, pts, target, cfg.min_spacing_m, ctx.seed(f"augment:kde:{hazard}"), accept)
        positives[hazard] = res.points
        report["hazards"][hazard] = {"inventory": int(len(pts)), "kept_inventory": res.n_inventory_kept,
                                     "drawn": res.n_drawn, "target": target, "bandwidth_m": kde.bandwidth,
                                     "shortfall": res.shortfall}
    pos = np.unique(np.vstack([positives["flood"], positives["landslide"]]), axis=0)

    rng = substream(cfg.seed, "augment:ocsvm")
    fit_pts = inv.xy
    if len(fit_pts) > sc.ocsvm_max_points:
        fit_pts = fit_pts[np.sort(rng.choice(len(fit_pts), sc.ocsvm_max_points, replace=False))]
    svm = ocsvm_fit(fit_pts, sc.nu, sc.gamma)
    n_neg = max(1, int(round(sc.negative_ratio * len(pos))))
    neg = negative_sample(svm, raster_extent(zones), n_neg, pos, cfg.min_spacing_m,
                          ctx.seed("augment:negatives"), accept)
    report["negatives"] = {"requested": n_neg, "returned": int(len(neg.points)),
                           "candidates": neg.n_candidates, "shortfall": neg.shortfall,
                           "ocsvm_iterations": svm.n_iter, "gamma": svm.gamma}

    xy = np.vstack([pos, neg.points])
    if d.label_rasters:
        labels = np.column_stack([ctx.raster(d.label_rasters[h]).sample(xy[:, 0], xy[:, 1]) for h in HAZARDS])
    else:
        from scipy.spatial import cKDTree
        labels = np.zeros((len(xy), 2))
        for h, hazard in enumerate(HAZARDS):
            dist, _ = cKDTree(positives[hazard]).query(xy, k=1)
            labels[:, h] = dist <= cfg.min_spacing_m
    names = list(factors)
    X = np.column_stack([factors[n].sample(xy[:, 0], xy[:, 1]) for n in names])
    zone_ids = assign_zones(xy, zones)
    ok = np.all(np.isfinite(X), axis=1) & np.all(np.isfinite(labels), axis=1) & (zone_ids >= 0)
    report["dropped_missing"] = int((~ok).sum())
    table = SampleTable(xy[ok], labels[ok].astype(np.int64), X[ok], names, zone_ids[ok])
    write_points_csv(table.to_points(), ctx.dir("augment") / "samples.csv")

    splits = {}
    for z in sorted(set(table.zone_ids.tolist())):
        idx = np.flatnonzero(table.zone_ids == z)
        parts = stratified_split(table.labels[idx], table.xy[idx], sc.split, ctx.seed(f"augment:split:{z}"))
        splits[str(z)] = {k: idx[p].tolist() for k, p in zip(("train", "val", "test"), parts)}
    report["zones"] = {z: {k: len(v) for k, v in s.items()} for z, s in splits.items()}
    report["n_samples"] = len(table)
    write_json(ctx.dir("augment") / "splits.json", splits)
    write_json(ctx.dir("augment") / "report.json", report)


def _samples(ctx) -> tuple[SampleTable, dict]:
    key = ("samples",)
    if key not in ctx._cache:
        d = ctx.dir("augment")
        table = SampleTable.from_points(read_points_csv(d / "samples.csv"))
        splits = json.loads((d / "splits.json").read_text())
        ctx._cache[key] = (table, {int(z): {k: np.array(v, dtype=np.int64) for k, v in s.items()}
                                   for z, s in splits.items()})
    return ctx._cache[key]


def _in_featsel(ctx):
    d = ctx.dir("augment")
    return [d / "samples.csv", d / "splits.json"]


def _select_features(ctx):
    table, splits = _samples(ctx)
    g = ctx.cfg.gbt
    hyper = GbtHyperparams(**g.selection, min_child_weight=g.min_child_weight, l2_lambda=g.l2_lambda)
    for z, s in splits.items():
        if not ctx.zone_selected(z):
            continue
        tr = s["train"]
        rep = select_features(table.features[tr], table.labels[tr], table.feature_names,
                              ctx.cfg.pearson_threshold, hyper, ctx.seed(f"select:{z}"))
        fallback = not rep.retained
        if fallback:
            # nothing carried signal for either hazard; keep the screened set
            rep.retained = list(rep.screened)
        out = rep.to_dict()
        out["zone"] = z
        out["fallback_to_screened"] = fallback
        write_json(ctx.dir("select-features") / f"zone_{z}.json", out)


def _feature_files(ctx) -> list[Path]:
    _require(ctx, _in_featsel(ctx))
    _, splits = _samples(ctx)
    return [ctx.dir("select-features") / f"zone_{z}.json" for z in splits if ctx.zone_selected(z)]


def _in_train(ctx):
    return _in_featsel(ctx) + _feature_files(ctx)


def _check_models(models) -> None:
    unknown = [m for m in models if m not in MODELS]
    if unknown:
        raise StageError(f"unknown model(s) {unknown}; choose from {list(MODELS)}")
    if "moe" in models and not ("ef" in models and "lf" in models):
        raise StageError("training 'moe' requires 'ef' and 'lf' in the same run")


def _train(ctx):
    _check_models(ctx.models)
    cfg = ctx.cfg
    table, splits = _samples(ctx)
    for z, s in splits.items():
        if not ctx.zone_selected(z):
            continue
        rep = json.loads((ctx.dir("select-features") / f"zone_{z}.json").read_text())
        feats = rep["retained"]
        cols = [table.feature_names.index(f) for f in feats]
        X = table.features[:, cols]
        Y = table.labels.astype(np.float64)
        tr, va = s["train"], s["val"]
        mean = X[tr].mean(axis=0)
        std = X[tr].std(axis=0)
        std = np.where(std > 0, std, 1.0)
        b = ZoneModelBundle(z, feats, mean, std)
        log = {"zone": z, "features": feats}
        if "lf" in ctx.models:
            log["lf"] = {}
            base = {"min_child_weight": cfg.gbt.min_child_weight, "l2_lambda": cfg.gbt.l2_lambda}
            for h, hazard in enumerate(HAZARDS):
                y = Y[tr, h]
                if y.min() == y.max():
                    raise ValidationError(f"zone {z}: {hazard} training labels are single-class")
                sr = random_search_cv(X[tr], y, cfg.gbt.space, cfg.gbt.cv_folds, cfg.gbt.n_iter,
                                      ctx.seed(f"train:lf:search:{z}:{hazard}"), base)
                b.lf[hazard] = gbt_train(X[tr], y, sr.best, ctx.seed(f"train:lf:fit:{z}:{hazard}"), feats)
                log["lf"][hazard] = {"best": asdict(sr.best), "candidates": sr.candidates, "cv_auc": sr.scores}
        if "ef" in ctx.models:
            m = cfg.mvg
            net = MvgNet(len(feats), m.hidden, m.dropout, m.gaussian_noise_std, m.log_diag_clamp,
                         substream(cfg.seed, f"train:ef:init:{z}"))
            tlog = mvg_train(net, b.standardize(X[tr]), Y[tr], b.standardize(X[va]), Y[va], m,
                             ctx.seed(f"train:ef:fit:{z}"))
            p_val = sigmoid(net.forward(b.standardize(X[va]))[:, :2])
            b.ef = net
            b.cal_f = beta_calibrate_fit(p_val[:, 0], Y[va, 0])
            b.cal_l = beta_calibrate_fit(p_val[:, 1], Y[va, 1])
            log["ef"] = {"train": tlog.to_dict(), "cal_f": b.cal_f.to_dict(), "cal_l": b.cal_l.to_dict()}
        if "moe" in ctx.models:
            gc = cfg.moe
            gate = GateNetwork(gc.hidden, gc.dropout, substream(cfg.seed, f"train:moe:init:{z}"))
            z_tr = _expert_inputs(b, X[tr])
            z_va = _expert_inputs(b, X[va])
            glog = moe_train(gate, z_tr, Y[tr], z_va, Y[va], gc, ctx.seed(f"train:moe:fit:{z}"))
            b.gate = gate
            log["moe"] = glog.to_dict()
        b.save(ctx.dir("train") / f"zone_{z}.json")
        write_json(ctx.dir("train") / f"zone_{z}_log.json", log)


def _expert_inputs(b: ZoneModelBundle, X) -> np.ndarray:
    e = ef_predict(b.ef, b.cal_f, b.cal_l, b.standardize(X))
    return np.column_stack([b.lf["flood"].predict_proba(X), b.lf["landslide"].predict_proba(X), e.s])


def _bundle_files(ctx) -> list[Path]:
    return sorted(ctx.dir("train").glob("zone_*[0-9].json"))


def _bundles(ctx) -> dict:
    key = ("bundles",)
    if key not in ctx._cache:
        ctx._cache[key] = {b.zone: b for b in map(ZoneModelBundle.load, _bundle_files(ctx))}
    return ctx._cache[key]


def _in_predict(ctx):
    d = ctx.data
    files = _bundle_files(ctx)
    if not files:
        raise StageError(f"missing prerequisite artifact: {ctx.rel(ctx.dir('train'))}/zone_*.json")
    return [ctx.dir("partition") / "tile_index.json", d.zones, *d.factors.values(), *files]


def _predict(ctx):
    _check_models(ctx.models)
    units = read_tile_index(ctx.dir("partition") / "tile_index.json")
    zones = ctx.raster(ctx.data.zones)
    tiles = predict_tiles(_bundles(ctx), units, ctx.factors(), zones, ctx.models, ctx.cfg.workers)
    write_tiles(tiles, zones, ctx.dir("predict") / "tiles")


def _merged_path(ctx, model, layer) -> Path:
    return ctx.dir("merge") / f"{model}_{layer}.asc"


def _in_merge(ctx):
    units = read_tile_index(_require(ctx, [ctx.dir("partition") / "tile_index.json"])[0])
    from .mosaic import tile_filename
    tiles = [ctx.dir("predict") / "tiles" / tile_filename(m, u.id, l)
             for u in units for m in ctx.models for l in model_layers(m)]
    return [ctx.dir("partition") / "tile_index.json", ctx.data.zones, *tiles]


def _merge(ctx):
    units = read_tile_index(ctx.dir("partition") / "tile_index.json")
    zones = ctx.raster(ctx.data.zones)
    tiles = read_tiles(units, zones, ctx.dir("predict") / "tiles", ctx.models)
    merged = idw_merge(tiles, units, zones)
    for model, layers in merged.items():
        for layer, r in layers.items():
            # cells outside the study area stay nodata
            write_ascii_grid(r.with_values(np.where(zones.valid, r.masked(), np.nan)),
                             _merged_path(ctx, model, layer))


def _in_classify(ctx):
    return [_merged_path(ctx, m, l) for m in ctx.models for l in ("s_f", "s_l")]


def _classify(ctx):
    k = ctx.cfg.n_severity_classes
    maps = {m: {l: read_ascii_grid(_merged_path(ctx, m, l)) for l in ("s_f", "s_l")} for m in ctx.models}
    breaks = {}
    for layer, hazard in (("s_f", "flood"), ("s_l", "landslide")):
        pooled = np.concatenate([maps[m][layer].values[maps[m][layer].valid] for m in ctx.models])
        breaks[hazard] = jenks_breaks(pooled, k, ctx.cfg.jenks_sample_cap, ctx.seed(f"classify:jenks:{hazard}"))
    write_json(ctx.dir("classify") / "breaks.json", {h: b.to_dict() for h, b in breaks.items()})
    palette = default_bivariate_palette(k)
    for m in ctx.models:
        classes = classify_bivariate(maps[m]["s_f"], maps[m]["s_l"], breaks["flood"], breaks["landslide"], k)
        write_ascii_grid(classes, ctx.dir("classify") / f"{m}_classes.asc")
        render_class_ppm(classes, palette, ctx.dir("classify") / f"{m}_classes.ppm")


def _in_evaluate(ctx):
    return (_in_featsel(ctx) + _feature_files(ctx) + _bundle_files(ctx) + [ctx.data.inventory, ctx.data.zones]
            + [ctx.dir("classify") / f"{m}_classes.asc" for m in ctx.models]
            + [_merged_path(ctx, m, l) for m in ctx.models if m != "lf" for l in ("logdet", "rho")])


def evaluation_tables(ctx) -> dict:
    """Test-split metrics per zone plus macro averages, MH density, Jaccard and zonal uncertainty."""
    table, splits = _samples(ctx)
    bundles = _bundles(ctx)
    k = ctx.cfg.n_severity_classes
    thr = ctx.cfg.classification_threshold
    rows = []
    for z, s in sorted(splits.items()):
        if not ctx.zone_selected(z) or z not in bundles:
            continue
        b = bundles[z]
        te = s["test"]
        cols = [table.feature_names.index(f) for f in b.features]
        pred = predict_bundle(b, table.features[np.ix_(te, cols)], ctx.models)
        for m in ctx.models:
            for h, hazard in enumerate(HAZARDS):
                y = table.labels[te, h]
                p = pred[m]["s_f" if h == 0 else "s_l"]
                try:
                    auc = auc_roc(y, p)
                except DegenerateInputError:
                    auc = math.nan
                cm = confusion_metrics(y, p, thr)
                rows.append({"zone": str(z), "model": m, "hazard": hazard, "n_test": int(len(te)),
                             "auc": auc, "brier": brier(y, p), "accuracy": cm.accuracy,
                             "precision": cm.precision, "recall": cm.recall, "f1": cm.f1, "fpr": cm.fpr,
                             "undefined": ";".join(cm.undefined)})
    macro = []
    for m in ctx.models:
        for hazard in HAZARDS:
            sel = [r for r in rows if r["model"] == m and r["hazard"] == hazard]
            rec = {"zone": "macro", "model": m, "hazard": hazard, "n_test": sum(r["n_test"] for r in sel)}
            skipped = []
            for f in METRIC_FIELDS:
                vals = [None if f in r["undefined"].split(";") else r[f] for r in sel]
                rec[f], n_skip = macro_average(vals)
                if n_skip:
                    skipped.append(f"{f}:{n_skip}")
            rec["undefined"] = ";".join(skipped)
            macro.append(rec)

    inv = SampleTable.from_points(read_points_csv(ctx.data.inventory))
    classes = {m: read_ascii_grid(ctx.dir("classify") / f"{m}_classes.asc") for m in ctx.models}
    density = {m: mh_density(inv.xy, c, k) for m, c in classes.items()}
    jac = []
    ms = list(ctx.models)
    for i, a in enumerate(ms):
        for bm in ms[i + 1:]:
            for hazard, r in jaccard_high(classes[a], classes[bm], k).items():
                jac.append({"a": a, "b": bm, "hazard": hazard, "jaccard": r.value, "both_empty": r.both_empty})

    zones = ctx.raster(ctx.data.zones)
    unc = []
    for m in ms:
        if m == "lf":
            continue
        logdet = read_ascii_grid(_merged_path(ctx, m, "logdet"))
        rho = read_ascii_grid(_merged_path(ctx, m, "rho"))
        for z in sorted(np.unique(zones.values[zones.valid]).astype(int)):
            mask = zones.valid & (zones.values == z) & logdet.valid & rho.valid
            if not mask.any():
                continue
            unc.append({"model": m, "zone": str(z), "mean_logdet": float(logdet.values[mask].mean()),
                        "mean_rho": float(rho.values[mask].mean()), "n_cells": int(mask.sum())})
    return {"metrics": rows + macro, "mh_density": {m: d.tolist() for m, d in density.items()},
            "jaccard": jac, "uncertainty": unc}


def write_evaluation(ev: dict, d: Path, k: int) -> None:
    header = ["zone", "model", "hazard", "n_test", *METRIC_FIELDS, "undefined"]
    write_csv(d / "metrics.csv", header, [[r[h] for h in header] for r in ev["metrics"]])
    write_json(d / "metrics.json", ev)
    labels = ["VL", "L", "M", "H", "VH"] if k == 5 else [str(i) for i in range(k)]
    rows = []
    for m, mat in ev["mh_density"].items():
        for i in range(k):
            for j in range(k):
                rows.append([m, labels[i], labels[j], i * k + j, float(mat[i][j])])
    write_csv(d / "mh_density.csv", ["model", "flood_class", "landslide_class", "code", "percent"], rows)
    write_csv(d / "jaccard.csv", ["a", "b", "hazard", "jaccard", "both_empty"],
              [[r["a"], r["b"], r["hazard"], r["jaccard"], r["both_empty"]] for r in ev["jaccard"]])
    write_csv(d / "uncertainty.csv", ["model", "zone", "mean_logdet", "mean_rho", "n_cells"],
              [[r["model"], r["zone"], r["mean_logdet"], r["mean_rho"], r["n_cells"]] for r in ev["uncertainty"]])


def _evaluate(ctx):
    write_evaluation(evaluation_tables(ctx), ctx.dir("evaluate"), ctx.cfg.n_severity_classes)


def _geo_models(ctx) -> list[str]:
    return [m for m in ctx.cfg.geodetector.models if m in ctx.models]


def _in_geodetector(ctx):
    d = ctx.data
    return ([d.zones, *d.factors.values()]
            + [_merged_path(ctx, m, l) for m in _geo_models(ctx) for l in ("s_f", "s_l")])


def geodetector_tables(result: dict) -> tuple[list, list, list]:
    q_rows, int_rows, risk_rows = [], [], []
    for z, by_h in result.items():
        for hazard, rep in by_h.items():
            if "error" in rep:
                continue
            for f, q in rep["q"].items():
                q_rows.append([z, hazard, f, q])
            for r in rep["interactions"].values():
                int_rows.append([z, hazard, r["a"], r["b"], r["q1"], r["q2"], r["q12"], r["type"], r["code"]])
            risk = rep.get("risk") or {}
            if "labels" in risk:
                for lab, mean, n in zip(risk["labels"], risk["means"], risk["counts"]):
                    risk_rows.append([z, hazard, risk["factor"], lab, mean, n, risk["F"], risk["p_value"],
                                      risk["significant"]])
    return q_rows, int_rows, risk_rows


def write_geodetector(result: dict, model: str, d: Path) -> None:
    write_json(d / f"{model}.json", result)
    q_rows, int_rows, risk_rows = geodetector_tables(result)
    write_csv(d / f"{model}_q.csv", ["zone", "hazard", "factor", "q"], q_rows)
    write_csv(d / f"{model}_interactions.csv",
              ["zone", "hazard", "factor_a", "factor_b", "q_a", "q_b", "q_ab", "type", "code"], int_rows)
    write_csv(d / f"{model}_risk.csv",
              ["zone", "hazard", "factor", "stratum", "mean", "n", "F", "p_value", "significant"], risk_rows)
    for z, by_h in result.items():
        for hazard, rep in by_h.items():
            if "error" not in rep and len(rep["top"]) > 1:
                write_ppm(interaction_heatmap(rep), d / f"{model}_zone{z}_{hazard}_interaction.ppm")


def interaction_heatmap(rep: dict, block: int = 16) -> np.ndarray:
    """Grayscale blocks of q(a AND b) over the top factors (diagonal = single-factor q)."""
    top = rep["top"]
    n = len(top)
    mat = np.zeros((n, n))
    for i, a in enumerate(top):
        mat[i, i] = rep["q"][a]
    for r in rep["interactions"].values():
        i, j = top.index(r["a"]), top.index(r["b"])
        mat[i, j] = mat[j, i] = r["q12"]
    level = np.round(255 * (1.0 - np.clip(mat, 0.0, 1.0))).astype(np.uint8)
    img = np.kron(level, np.ones((block, block), dtype=np.uint8))
    return np.repeat(img[:, :, None], 3, axis=2)


def _geodetector(ctx):
    g = ctx.cfg.geodetector
    zones = ctx.raster(ctx.data.zones)
    factors = ctx.factors()
    for m in _geo_models(ctx):
        maps = {"flood": read_ascii_grid(_merged_path(ctx, m, "s_f")),
                "landslide": read_ascii_grid(_merged_path(ctx, m, "s_l"))}
        result = detector_suite(maps, factors, zones, ctx.data.categorical, g.top_k, g.n_strata,
                                g.max_cells, g.alpha, ctx.seed(f"geodetector:{m}"))
        write_geodetector(result, m, ctx.dir("geodetector"))


def _in_report(ctx):
    return (_in_evaluate(ctx) + [ctx.dir("classify") / "breaks.json"]
            + [ctx.dir("geodetector") / f"{m}.json" for m in _geo_models(ctx)])


def _report(ctx):
    from . import plotting

    d = ctx.dir("report")
    k = ctx.cfg.n_severity_classes
    ev = evaluation_tables(ctx)
    write_evaluation(ev, d, k)
    palette = default_bivariate_palette(k)
    for m in ctx.models:
        classes = read_ascii_grid(ctx.dir("classify") / f"{m}_classes.asc")
        render_class_ppm(classes, palette, d / f"{m}_classes.ppm")
        plotting.class_map(classes, k, d / f"{m}_classes.png", f"{m.upper()} bivariate susceptibility")
        plotting.density_matrix(np.array(ev["mh_density"][m]), d / f"{m}_mh_density.png",
                                f"{m.upper()} MH density (%)")
        if m != "lf":
            for layer in ("logdet", "rho"):
                r = read_ascii_grid(_merged_path(ctx, m, layer))
                plotting.continuous_map(r, d / f"{m}_{layer}.png", f"{m.upper()} {layer}",
                                        "coolwarm" if layer == "rho" else "viridis")
    plotting.metrics_bars([r for r in ev["metrics"] if r["zone"] == "macro"], d / "macro_metrics.png")
    for m in _geo_models(ctx):
        result = json.loads((ctx.dir("geodetector") / f"{m}.json").read_text())
        write_geodetector(result, m, d / "geodetector")
        for z, by_h in result.items():
            for hazard, rep in by_h.items():
                if "error" in rep:
                    continue
                if len(rep["top"]) > 1:
                    plotting.interaction_matrix(rep, d / f"{m}_zone{z}_{hazard}_interaction.png",
                                                f"zone {z} {hazard}")
                if rep.get("risk") and "labels" in rep["risk"]:
                    plotting.risk_bars(rep["risk"], d / f"{m}_zone{z}_{hazard}_risk.png", f"zone {z} {hazard}")
    breaks = json.loads((ctx.dir("classify") / "breaks.json").read_text())
    macro = {f"{r['model']}/{r['hazard']}": {f: r[f] for f in METRIC_FIELDS}
             for r in ev["metrics"] if r["zone"] == "macro"}
    write_json(d / "summary.json", {"macro": macro, "breaks": breaks, "uncertainty": ev["uncertainty"]})


STAGES: dict[str, tuple[Callable, Callable]] = {
    "synth": (_in_synth, _synth),
    "partition": (_in_partition, _partition),
    "augment": (_in_augment, _augment),
    "select-features": (_in_featsel, _select_features),
    "train": (_in_train, _train),
    "predict": (_in_predict, _predict),
    "merge": (_in_merge, _merge),
    "classify": (_in_classify, _classify),
    "evaluate": (_in_evaluate, _evaluate),
    "geodetector": (_in_geodetector, _geodetector),
    "report": (_in_report, _report),
}


def run_all(ctx: Context) -> dict:
    stages = STAGE_ORDER if ctx.cfg.synth is not None and ctx.cfg.data is None else STAGE_ORDER[1:]
    return {s: run_stage(ctx, s) for s in stages}
