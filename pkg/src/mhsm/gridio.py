"""Raster, point-table and image I/O.

Rasters are ESRI ASCII grids. Values are held as a ``(nrows, ncols)`` float64
array whose row 0 is the top (northernmost) row of the map. Point tables are
CSV files with mandatory ``x,y,flood,landslide`` columns; every other column
is a feature except the optional ``zone_id`` column.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DimensionError, ParseError, ValidationError

DEFAULT_NODATA = -9999.0
HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize")
POINT_COLUMNS = ("x", "y", "flood", "landslide")
ZONE_COLUMN = "zone_id"


def format_number(v: float) -> str:
    """Shortest decimal text that parses back to exactly ``v``."""
    v = float(v)
    if not math.isfinite(v):
        raise ValidationError(f"cannot serialize non-finite value {v!r}")
    if v.is_integer() and abs(v) < 1e16:
        return str(int(v))
    return repr(v)


@dataclass(frozen=True, eq=False)
class Raster:
    values: np.ndarray
    xll: float
    yll: float
    cellsize: float
    nodata: float = DEFAULT_NODATA

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2 or values.size == 0:
            raise DimensionError(f"raster values must be a non-empty 2-D array, got shape {values.shape}")
        if not self.cellsize > 0:
            raise ValidationError(f"cellsize must be positive, got {self.cellsize}")
        valid = values != self.nodata
        if not np.all(np.isfinite(values[valid])):
            raise ValidationError("raster contains non-finite values outside the nodata sentinel")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def nrows(self) -> int:
        return self.values.shape[0]

    @property
    def ncols(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def extent(self) -> tuple[float, float, float, float]:
        """(xmin, ymin, xmax, ymax)"""
        return (self.xll, self.yll,
                self.xll + self.ncols * self.cellsize,
                self.yll + self.nrows * self.cellsize)

    @property
    def valid(self) -> np.ndarray:
        return self.values != self.nodata

    def masked(self) -> np.ndarray:
        """Copy of the values with nodata replaced by NaN."""
        out = self.values.copy()
        out[~self.valid] = np.nan
        return out

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        cols = self.xll + (np.arange(self.ncols) + 0.5) * self.cellsize
        rows = self.yll + (self.nrows - np.arange(self.nrows) - 0.5) * self.cellsize
        return cols, rows

    def index_of(self, x, y) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Row/col of the cell containing each point plus an in-bounds mask.

        Uses floor indexing, so a point on a shared cell edge belongs to the
        cell on its east (column) or north (row) side.
        """
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        col = np.floor((x - self.xll) / self.cellsize).astype(np.int64)
        from_bottom = np.floor((y - self.yll) / self.cellsize).astype(np.int64)
        row = self.nrows - 1 - from_bottom
        inside = (col >= 0) & (col < self.ncols) & (row >= 0) & (row < self.nrows)
        return row, col, inside

    def sample(self, x, y) -> np.ndarray:
        """Cell values at points; NaN outside the grid or on nodata."""
        row, col, inside = self.index_of(x, y)
        out = np.full(np.shape(row), np.nan)
        v = self.values[row[inside], col[inside]]
        v = np.where(v == self.nodata, np.nan, v)
        out[inside] = v
        return out

    def with_values(self, values: np.ndarray) -> "Raster":
        """Same georeferencing, new values (NaN becomes nodata)."""
        values = np.array(values, dtype=np.float64)
        if values.shape != self.shape:
            raise DimensionError(f"expected shape {self.shape}, got {values.shape}")
        values[~np.isfinite(values)] = self.nodata
        return Raster(values, self.xll, self.yll, self.cellsize, self.nodata)

    def same_grid(self, other: "Raster") -> bool:
        return (self.shape == other.shape and self.xll == other.xll
                and self.yll == other.yll and self.cellsize == other.cellsize)


def read_ascii_grid(path) -> Raster:
    path = Path(path)
    with path.open("r") as fh:
        lines = fh.read().splitlines()
    header = {}
    i = 0
    while i < len(lines) and len(header) < 6:
        parts = lines[i].split()
        if not parts:
            i += 1
            continue
        key = parts[0].lower()
        if key not in HEADER_KEYS and key != "nodata_value":
            break
        if len(parts) != 2:
            raise ParseError(f"{path}: malformed header line {i + 1}: {lines[i]!r}")
        try:
            header[key] = float(parts[1])
        except ValueError:
            raise ParseError(f"{path}: malformed header line {i + 1}: {lines[i]!r}") from None
        i += 1
    missing = [k for k in HEADER_KEYS if k not in header]
    if missing:
        bad = lines[i] if i < len(lines) else "<end of file>"
        raise ParseError(f"{path}: header missing {missing} (line {i + 1}: {bad!r})")
    ncols, nrows = header["ncols"], header["nrows"]
    if ncols != int(ncols) or nrows != int(nrows) or ncols < 1 or nrows < 1:
        raise ParseError(f"{path}: ncols/nrows must be positive integers")
    ncols, nrows = int(ncols), int(nrows)
    tokens = " ".join(lines[i:]).split()
    if len(tokens) != ncols * nrows:
        raise DimensionError(
            f"{path}: expected {nrows}x{ncols}={ncols * nrows} values, found {len(tokens)}")
    try:
        values = np.array(tokens, dtype=np.float64).reshape(nrows, ncols)
    except ValueError as exc:
        raise ParseError(f"{path}: non-numeric cell value ({exc})") from None
    return Raster(values, header["xllcorner"], header["yllcorner"], header["cellsize"],
                  header.get("nodata_value", DEFAULT_NODATA))


def write_ascii_grid(r: Raster, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    nodata_text = format_number(r.nodata)
    rows = []
    for row in r.values:
        rows.append(" ".join(nodata_text if v == r.nodata else format_number(v) for v in row))
    header = [
        f"ncols {r.ncols}",
        f"nrows {r.nrows}",
        f"xllcorner {format_number(r.xll)}",
        f"yllcorner {format_number(r.yll)}",
        f"cellsize {format_number(r.cellsize)}",
        f"NODATA_value {nodata_text}",
    ]
    path.write_text("\n".join(header + rows) + "\n")


@dataclass
class SamplePoint:
    x: float
    y: float
    label_flood: int
    label_landslide: int
    features: dict = field(default_factory=dict)
    zone_id: Optional[int] = None

    def __post_init__(self):
        for name in ("label_flood", "label_landslide"):
            if getattr(self, name) not in (0, 1):
                raise ValidationError(f"{name} must be 0 or 1, got {getattr(self, name)!r}")


def _parse_label(text: str, column: str, lineno: int) -> int:
    try:
        v = float(text)
    except ValueError:
        raise ValidationError(f"line {lineno}: non-numeric {column} label {text!r}") from None
    if v not in (0.0, 1.0):
        raise ValidationError(f"line {lineno}: {column} label must be 0 or 1, got {text!r}")
    return int(v)


def read_points_csv(path) -> list[SamplePoint]:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValidationError(f"{path}: empty point table") from None
        missing = [c for c in POINT_COLUMNS if c not in header]
        if missing:
            raise ValidationError(f"{path}: missing mandatory columns {missing}")
        if len(set(header)) != len(header):
            raise ValidationError(f"{path}: duplicate column names")
        idx = {c: header.index(c) for c in POINT_COLUMNS}
        zone_idx = header.index(ZONE_COLUMN) if ZONE_COLUMN in header else None
        feature_cols = [(j, h) for j, h in enumerate(header)
                        if h not in POINT_COLUMNS and h != ZONE_COLUMN]
        points = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValidationError(f"{path}: line {lineno} has {len(row)} fields, expected {len(header)}")
            try:
                x = float(row[idx["x"]])
                y = float(row[idx["y"]])
            except ValueError:
                raise ValidationError(f"{path}: line {lineno}: missing or invalid x/y") from None
            zone = None
            if zone_idx is not None and row[zone_idx].strip() != "":
                zone = int(float(row[zone_idx]))
            points.append(SamplePoint(
                x, y,
                _parse_label(row[idx["flood"]], "flood", lineno),
                _parse_label(row[idx["landslide"]], "landslide", lineno),
                {name: float(row[j]) for j, name in feature_cols},
                zone,
            ))
    return points


def write_points_csv(points: Sequence[SamplePoint], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(points[0].features) if points else []
    with_zone = any(p.zone_id is not None for p in points)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(POINT_COLUMNS) + ([ZONE_COLUMN] if with_zone else []) + names)
        for p in points:
            if list(p.features) != names:
                raise ValidationError("all points must share the same ordered feature names")
            row = [format_number(p.x), format_number(p.y), str(p.label_flood), str(p.label_landslide)]
            if with_zone:
                row.append("" if p.zone_id is None else str(p.zone_id))
            row += [format_number(p.features[n]) for n in names]
            w.writerow(row)


@dataclass
class SampleTable:
    """Column-oriented view of a point table used by the numerical stages."""

    xy: np.ndarray
    labels: np.ndarray  # (n, 2) int: flood, landslide
    features: np.ndarray  # (n, p)
    feature_names: list
    zone_ids: np.ndarray  # (n,) int, -1 = unassigned

    def __len__(self):
        return len(self.xy)

    @classmethod
    def from_points(cls, points: Sequence[SamplePoint]) -> "SampleTable":
        names = list(points[0].features) if points else []
        return cls(
            xy=np.array([(p.x, p.y) for p in points], dtype=np.float64).reshape(-1, 2),
            labels=np.array([(p.label_flood, p.label_landslide) for p in points], dtype=np.int64).reshape(-1, 2),
            features=np.array([[p.features[n] for n in names] for p in points],
                              dtype=np.float64).reshape(len(points), len(names)),
            feature_names=names,
            zone_ids=np.array([-1 if p.zone_id is None else p.zone_id for p in points], dtype=np.int64),
        )

    def to_points(self) -> list[SamplePoint]:
        return [
            SamplePoint(float(x), float(y), int(lf), int(ll),
                        dict(zip(self.feature_names, map(float, f))),
                        None if z < 0 else int(z))
            for (x, y), (lf, ll), f, z in zip(self.xy, self.labels, self.features, self.zone_ids)
        ]

    def subset(self, idx) -> "SampleTable":
        return SampleTable(self.xy[idx], self.labels[idx], self.features[idx],
                           list(self.feature_names), self.zone_ids[idx])

    def columns(self, names: Iterable[str]) -> np.ndarray:
        pos = [self.feature_names.index(n) for n in names]
        return self.features[:, pos]


def default_bivariate_palette(k: int = 5) -> np.ndarray:
    """k x k RGB table: rows = flood class (VL..VH), columns = landslide class."""
    t = np.linspace(0.0, 1.0, k)
    low = np.array([232, 232, 232], dtype=np.float64)
    blue = np.array([40, 110, 200], dtype=np.float64)
    red = np.array([210, 60, 40], dtype=np.float64)
    dark = np.array([60, 20, 80], dtype=np.float64)
    pal = np.empty((k, k, 3))
    for i, a in enumerate(t):
        for j, b in enumerate(t):
            pal[i, j] = (1 - a) * (1 - b) * low + a * (1 - b) * blue + (1 - a) * b * red + a * b * dark
    return np.round(pal).astype(np.uint8)


def write_ppm(rgb: np.ndarray, path) -> None:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise DimensionError(f"expected (h, w, 3) image, got {rgb.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w, _ = rgb.shape
    with path.open("wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos].decode("ascii"))
    pos += 1
    if tokens[0] != "P6" or tokens[3] != "255":
        raise ParseError(f"{path}: not an 8-bit binary PPM")
    w, h = int(tokens[1]), int(tokens[2])
    return np.frombuffer(data[pos:pos + w * h * 3], dtype=np.uint8).reshape(h, w, 3)


def render_class_ppm(classes: Raster, palette: np.ndarray, path) -> None:
    palette = np.asarray(palette, dtype=np.uint8)
    k = palette.shape[0]
    if palette.shape != (k, k, 3):
        raise DimensionError(f"palette must be (k, k, 3), got {palette.shape}")
    valid = classes.valid
    codes = classes.values[valid]
    if codes.size and (np.any(codes != np.round(codes)) or codes.min() < 0 or codes.max() >= k * k):
        raise ValidationError(f"class codes must be integers in 0..{k * k - 1}")
    img = np.full(classes.shape + (3,), 255, dtype=np.uint8)
    c = codes.astype(np.int64)
    img[valid] = palette[c // k, c % k]
    write_ppm(img, path)
