"""Run configuration: one JSON document, unknown keys rejected."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigurationError


@dataclass
class DataConfig:
    factors: dict = field(default_factory=dict)  # name -> .asc path
    zones: str = ""
    inventory: str = ""
    # Optional per-cell observed label rasters (synthetic areas). When given,
    # sample labels are read from them instead of inferred from the inventory.
    label_rasters: Optional[dict] = None
    categorical: list = field(default_factory=list)


@dataclass
class SamplingConfig:
    augment_factor: float = 2.0
    negative_ratio: float = 1.0
    nu: float = 0.1
    gamma: Optional[float] = None
    ocsvm_max_points: int = 2000
    split: list = field(default_factory=lambda: [0.8, 0.1, 0.1])


@dataclass
class GbtSearchConfig:
    n_iter: int = 20
    cv_folds: int = 3
    space: dict = field(default_factory=lambda: {
        "n_trees": [100, 200, 400],
        "max_depth": [3, 4, 6],
        "learning_rate": [0.05, 0.1, 0.2],
        "subsample": [0.7, 1.0],
        "colsample": [0.7, 1.0],
        "scale_pos_weight": [1.0, "balanced"],
    })
    min_child_weight: float = 1.0
    l2_lambda: float = 1.0
    # Fixed hyperparameters of the attribution model used for feature selection.
    selection: dict = field(default_factory=lambda: {
        "n_trees": 100, "max_depth": 4, "learning_rate": 0.1,
        "subsample": 1.0, "colsample": 1.0, "scale_pos_weight": 1.0,
    })


@dataclass
class MvgConfig:
    hidden: list = field(default_factory=lambda: [256, 128, 64])
    gaussian_noise_std: float = 0.01
    dropout: float = 0.10
    lr: float = 1e-4
    batch_size: int = 256
    max_epochs: int = 100
    patience: int = 10
    log_diag_clamp: float = 8.0


@dataclass
class GateConfig:
    hidden: list = field(default_factory=lambda: [32, 16])
    dropout: list = field(default_factory=lambda: [0.20, 0.10])
    lr: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 200
    patience: int = 10
    label_smoothing: float = 0.05


@dataclass
class GeodetectorConfig:
    n_strata: int = 5
    top_k: int = 5
    max_cells: int = 50000
    alpha: float = 0.05
    models: list = field(default_factory=lambda: ["moe"])


@dataclass
class SynthConfig:
    width_m: float = 60000.0
    height_m: float = 60000.0
    cellsize: float = 100.0
    n_zones: int = 4
    rho_star: float = -0.25
    n_inventory: int = 1000
    noise_std: float = 0.05
    signal_scale: float = 2.0
    prevalence: float = 0.2
    n_bumps: int = 30
    seed: Optional[int] = None


@dataclass
class RunConfig:
    seed: int = 0
    tile_size_m: float = 15000.0
    overlap_m: float = 1500.0
    min_spacing_m: float = 100.0
    pearson_threshold: float = 0.8
    n_severity_classes: int = 5
    classification_threshold: float = 0.5
    jenks_sample_cap: int = 10000
    workers: int = 1
    data: Optional[DataConfig] = None
    synth: Optional[SynthConfig] = None
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    gbt: GbtSearchConfig = field(default_factory=GbtSearchConfig)
    mvg: MvgConfig = field(default_factory=MvgConfig)
    moe: GateConfig = field(default_factory=GateConfig)
    geodetector: GeodetectorConfig = field(default_factory=GeodetectorConfig)
    base_dir: str = field(default=".", metadata={"internal": True})

    def __post_init__(self):
        if not 0 <= self.overlap_m < self.tile_size_m / 2:
            raise ConfigurationError("overlap_m must satisfy 0 <= overlap_m < tile_size_m / 2")
        if self.n_severity_classes < 2:
            raise ConfigurationError("n_severity_classes must be >= 2")
        if not 0 < self.pearson_threshold < 1:
            raise ConfigurationError("pearson_threshold must lie in (0, 1)")
        if self.data is None and self.synth is None:
            raise ConfigurationError("config needs a 'data' block or a 'synth' block")
        if self.synth is not None and not abs(self.synth.rho_star) < 1:
            raise ConfigurationError("synth.rho_star must satisfy |rho_star| < 1")
        if not self.min_spacing_m >= 0:
            raise ConfigurationError("min_spacing_m must be non-negative")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        return d

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    def resolve(self, p: str) -> Path:
        p = Path(p)
        return p if p.is_absolute() else Path(self.base_dir) / p


def _build(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{where}: expected an object")
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls) if not f.metadata.get("internal")}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigurationError(f"{where}: unknown key(s) {unknown}")
    kwargs = {}
    for name, value in raw.items():
        target = hints[name]
        args = typing.get_args(target)
        inner = next((a for a in args if dataclasses.is_dataclass(a)), target)
        if dataclasses.is_dataclass(inner) and value is not None:
            value = _build(inner, value, f"{where}.{name}")
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigurationError(f"{where}: {exc}") from None


def config_from_dict(raw: dict, base_dir=".") -> RunConfig:
    cfg = _build(RunConfig, raw, "config")
    cfg.base_dir = str(base_dir)
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(raw, path.parent)


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named stage or task, derived from the run seed."""
    digest = hashlib.sha256(f"{int(seed)}:{name}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def subseed(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{int(seed)}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1
