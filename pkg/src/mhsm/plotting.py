"""Report figures (matplotlib, non-interactive backend)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import ListedColormap  # noqa: E402

from .gridio import Raster, default_bivariate_palette  # noqa: E402

LEVELS = ["VL", "L", "M", "H", "VH"]


def _levels(k: int) -> list[str]:
    return LEVELS if k == 5 else [str(i) for i in range(k)]


def _save(fig, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)


def class_map(classes: Raster, k: int, path, title: str = "") -> None:
    palette = default_bivariate_palette(k).reshape(k * k, 3) / 255.0
    img = np.ma.masked_where(~classes.valid, classes.values)
    fig, (ax, leg) = plt.subplots(1, 2, figsize=(9, 6), gridspec_kw={"width_ratios": [4, 1]})
    ax.imshow(img, cmap=ListedColormap(palette), vmin=-0.5, vmax=k * k - 0.5,
              extent=_extent(classes), interpolation="nearest")
    ax.set_title(title)
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    key = default_bivariate_palette(k)[::-1]
    leg.imshow(key, origin="upper", interpolation="nearest")
    leg.set_xticks(range(k), _levels(k))
    leg.set_yticks(range(k), _levels(k)[::-1])
    leg.set_xlabel("landslide")
    leg.set_ylabel("flood")
    _save(fig, path)


def continuous_map(r: Raster, path, title: str = "", cmap: str = "viridis") -> None:
    fig, ax = plt.subplots(figsize=(7, 6))
    im = ax.imshow(np.ma.masked_where(~r.valid, r.values), cmap=cmap, extent=_extent(r),
                   interpolation="nearest")
    fig.colorbar(im, ax=ax, shrink=0.8)
    ax.set_title(title)
    _save(fig, path)


def density_matrix(mat, path, title: str = "") -> None:
    mat = np.asarray(mat, dtype=np.float64)
    k = mat.shape[0]
    fig, ax = plt.subplots(figsize=(5, 4.5))
    im = ax.imshow(mat, cmap="Reds")
    for i in range(k):
        for j in range(k):
            ax.text(j, i, f"{mat[i, j]:.1f}", ha="center", va="center", fontsize=8)
    ax.set_xticks(range(k), _levels(k))
    ax.set_yticks(range(k), _levels(k))
    ax.set_xlabel("landslide class")
    ax.set_ylabel("flood class")
    fig.colorbar(im, ax=ax, shrink=0.8)
    ax.set_title(title)
    _save(fig, path)


def interaction_matrix(rep: dict, path, title: str = "") -> None:
    top = rep["top"]
    n = len(top)
    mat = np.full((n, n), np.nan)
    codes = [["" for _ in range(n)] for _ in range(n)]
    for i, a in enumerate(top):
        mat[i, i] = rep["q"][a]
    for r in rep["interactions"].values():
        i, j = top.index(r["a"]), top.index(r["b"])
        mat[i, j] = mat[j, i] = r["q12"]
        codes[i][j] = codes[j][i] = r["code"]
    fig, ax = plt.subplots(figsize=(5.5, 5))
    im = ax.imshow(mat, cmap="YlGnBu", vmin=0, vmax=1)
    for i in range(n):
        for j in range(n):
            label = f"{mat[i, j]:.2f}" + (f"\n{codes[i][j]}" if codes[i][j] else "")
            ax.text(j, i, label, ha="center", va="center", fontsize=7)
    ax.set_xticks(range(n), top, rotation=45, ha="right")
    ax.set_yticks(range(n), top)
    fig.colorbar(im, ax=ax, shrink=0.8, label="q")
    ax.set_title(title)
    _save(fig, path)


def risk_bars(risk: dict, path, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar(risk["labels"], risk["means"], color="tab:orange")
    ax.set_ylabel("mean susceptibility")
    ax.set_xlabel(risk.get("factor", ""))
    sig = "significant" if risk["significant"] else "n.s."
    ax.set_title(f"{title}  F={risk['F']:.3g}, p={risk['p_value']:.3g} ({sig})")
    _save(fig, path)


def metrics_bars(rows, path) -> None:
    """Grouped bars of macro AUC / F1 / Brier per model and hazard."""
    metrics = ("auc", "f1", "brier")
    labels = [f"{r['model']}\n{r['hazard']}" for r in rows]
    x = np.arange(len(rows))
    w = 0.8 / len(metrics)
    fig, ax = plt.subplots(figsize=(max(6, len(rows) * 1.1), 4))
    for i, m in enumerate(metrics):
        ax.bar(x + (i - 1) * w, [r[m] for r in rows], w, label=m)
    ax.set_xticks(x, labels)
    ax.set_ylim(0, 1)
    ax.legend()
    ax.set_title("macro-averaged test metrics")
    _save(fig, path)


def _extent(r: Raster):
    x0, y0, x1, y1 = r.extent
    return (x0, x1, y0, y1)
