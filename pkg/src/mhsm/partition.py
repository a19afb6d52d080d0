"""Two-level spatial partitioning: overlapping lattice tiles and zone portions.

Tiles are anchored at the top-left corner of the study extent and numbered
row-major from there. Edge tiles are truncated to the extent rather than
shifted inward.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ValidationError
from .gridio import Raster, SamplePoint


@dataclass(frozen=True)
class Rect:
    x0: float
    y0: float
    x1: float
    y1: float

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))

    def contains(self, other: "Rect") -> bool:
        return (self.x0 <= other.x0 and self.y0 <= other.y0
                and other.x1 <= self.x1 and other.y1 <= self.y1)

    def as_list(self) -> list:
        return [self.x0, self.y0, self.x1, self.y1]


@dataclass(frozen=True)
class ComputationalUnit:
    id: int
    core: Rect
    padded: Rect
    zone_ids: tuple = ()

    def to_dict(self) -> dict:
        return {"id": self.id, "core": self.core.as_list(),
                "padded": self.padded.as_list(), "zone_ids": list(self.zone_ids)}

    @classmethod
    def from_dict(cls, d: dict) -> "ComputationalUnit":
        return cls(int(d["id"]), Rect(*d["core"]), Rect(*d["padded"]), tuple(d["zone_ids"]))


def build_units(extent: Rect, tile_size_m: float, overlap_m: float) -> list[ComputationalUnit]:
    if not (extent.width > 0 and extent.height > 0):
        raise ValidationError(f"degenerate extent {extent}")
    if not tile_size_m > 2 * overlap_m or overlap_m < 0:
        raise ValidationError("tile_size_m must exceed 2 * overlap_m")
    ncol = math.ceil(extent.width / tile_size_m)
    nrow = math.ceil(extent.height / tile_size_m)
    units = []
    for r in range(nrow):
        y1 = extent.y1 - r * tile_size_m
        y0 = max(y1 - tile_size_m, extent.y0)
        for c in range(ncol):
            x0 = extent.x0 + c * tile_size_m
            x1 = min(x0 + tile_size_m, extent.x1)
            core = Rect(x0, y0, x1, y1)
            padded = Rect(max(x0 - overlap_m, extent.x0), max(y0 - overlap_m, extent.y0),
                          min(x1 + overlap_m, extent.x1), min(y1 + overlap_m, extent.y1))
            units.append(ComputationalUnit(len(units), core, padded))
    return units


def raster_extent(r: Raster) -> Rect:
    return Rect(*r.extent)


def cell_window(rect: Rect, grid: Raster) -> tuple[slice, slice]:
    """Row/column slices of the cells whose centers fall inside ``rect``."""
    cs = grid.cellsize
    c0 = math.ceil((rect.x0 - grid.xll) / cs - 0.5)
    c1 = math.ceil((rect.x1 - grid.xll) / cs - 0.5)
    top = grid.yll + grid.nrows * cs
    r0 = math.ceil((top - rect.y1) / cs - 0.5)
    r1 = math.ceil((top - rect.y0) / cs - 0.5)
    c0, c1 = max(c0, 0), min(c1, grid.ncols)
    r0, r1 = max(r0, 0), min(r1, grid.nrows)
    return slice(r0, max(r0, r1)), slice(c0, max(c0, c1))


def zone_portions(unit: ComputationalUnit, zones: Raster) -> dict[int, np.ndarray]:
    """Boolean masks over the unit's padded window, one per zone present."""
    rows, cols = cell_window(unit.padded, zones)
    window = zones.values[rows, cols]
    valid = window != zones.nodata
    out = {}
    for z in np.unique(window[valid]):
        out[int(z)] = valid & (window == z)
    return out


def attach_zone_ids(units: list[ComputationalUnit], zones: Raster) -> list[ComputationalUnit]:
    return [ComputationalUnit(u.id, u.core, u.padded, tuple(sorted(zone_portions(u, zones))))
            for u in units]


def assign_zone(p: SamplePoint, zones: Raster) -> Optional[int]:
    row, col, inside = zones.index_of(p.x, p.y)
    if not inside:
        return None
    v = zones.values[int(row), int(col)]
    return None if v == zones.nodata else int(v)


def assign_zones(xy: np.ndarray, zones: Raster) -> np.ndarray:
    """Vectorized zone lookup; -1 where unassigned."""
    v = zones.sample(xy[:, 0], xy[:, 1])
    out = np.full(len(xy), -1, dtype=np.int64)
    ok = np.isfinite(v)
    out[ok] = v[ok].astype(np.int64)
    return out


def write_tile_index(units: list[ComputationalUnit], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps([u.to_dict() for u in units], indent=1) + "\n")


def read_tile_index(path) -> list[ComputationalUnit]:
    return [ComputationalUnit.from_dict(d) for d in json.loads(Path(path).read_text())]
