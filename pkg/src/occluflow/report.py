"""Heatmap and figure rendering for weight maps and experiment results."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .regions import FacialLayout
from .weights import WeightMap

GRID = 5


class ReportError(OSError):
    pass


def heatmap_grid(wm: WeightMap, layout: FacialLayout, size: int = GRID) -> tuple[np.ndarray, list[dict]]:
    """Grayscale cell values (0..255) and the per-region rows behind them.

    Visible regions are min-max scaled into [1, 255] so that the blank
    value 0 is reserved for occluded regions and uncovered cells; a map whose
    visible weights are all equal renders uniform mid gray.
    """
    img = np.zeros((size, size), dtype=np.int64)
    visible = [r for r in layout.ids if wm.apparitions.get(r, 0) > 0]
    vals = np.array([wm.weights[r] for r in visible], dtype=np.float64)
    lo, hi = (vals.min(), vals.max()) if len(vals) else (0.0, 0.0)
    rows = []
    seen: dict[tuple[int, int], int] = {}
    for r in layout.ids:
        cell = layout.grid_cell(r, size)
        if cell in seen:
            raise ReportError(f"regions {seen[cell]} and {r} share heatmap cell {cell}")
        seen[cell] = r
        if r in visible:
            level = 128 if hi == lo else 1 + int(round(254 * (wm.weights[r] - lo) / (hi - lo)))
        else:
            level = 0
        img[cell] = level
        rows.append({"row": cell[0], "col": cell[1], "region": r, "weight": wm.weights[r], "level": level})
    return img, rows


def write_pgm(path: str | Path, img: np.ndarray, maxval: int = 255) -> None:
    lines = ["P2", f"{img.shape[1]} {img.shape[0]}", str(maxval)]
    lines += [" ".join(str(int(v)) for v in row) for row in img]
    Path(path).write_text("\n".join(lines) + "\n")


def read_pgm(path: str | Path) -> np.ndarray:
    tokens = [t for line in Path(path).read_text().splitlines() for t in line.split("#")[0].split()]
    if not tokens or tokens[0] != "P2":
        raise ReportError(f"{path}: not an ASCII graymap")
    w, h = int(tokens[1]), int(tokens[2])
    return np.array([int(t) for t in tokens[4:4 + w * h]]).reshape(h, w)


def emit_heatmap(wm: WeightMap, layout: FacialLayout, path: str | Path) -> tuple[Path, Path]:
    """Write ``<path>.pgm`` and ``<path>.csv``; returns both paths."""
    base = Path(path)
    if base.suffix in (".pgm", ".csv"):
        base = base.with_suffix("")
    img, rows = heatmap_grid(wm, layout)
    pgm, table = base.with_suffix(".pgm"), base.with_suffix(".csv")
    try:
        base.parent.mkdir(parents=True, exist_ok=True)
        write_pgm(pgm, img)
        with open(table, "w", newline="") as f:
            wr = csv.writer(f, lineterminator="\n")
            wr.writerow(["expression", "occlusion", "row", "col", "region", "weight", "level"])
            for r in rows:
                wr.writerow([wm.expression, wm.occlusion, r["row"], r["col"], r["region"], repr(float(r["weight"])),
                             r["level"]])
    except OSError as exc:
        raise ReportError(f"cannot write heatmap {base}: {exc}") from exc
    return pgm, table


# -- matplotlib figures -------------------------------------------------------

def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams.update({"font.size": 8, "axes.titlesize": 8, "svg.hashsalt": "occluflow"})
    return plt


def _save(fig, path: Path) -> Path:
    fig.savefig(path, dpi=120, metadata={"Software": None})
    import matplotlib.pyplot as plt

    plt.close(fig)
    return path


def plot_heatmaps(maps: Mapping[tuple[str, str], WeightMap], layout: FacialLayout, expressions: Sequence[str],
                  occlusions: Sequence[str], path: str | Path) -> Path:
    plt = _pyplot()
    fig, axes = plt.subplots(len(occlusions), len(expressions), squeeze=False,
                             figsize=(1.3 * len(expressions), 1.4 * len(occlusions)))
    for i, occ in enumerate(occlusions):
        for j, expr in enumerate(expressions):
            ax = axes[i][j]
            img, _ = heatmap_grid(maps[(expr, occ)], layout)
            ax.imshow(img, cmap="hot", vmin=0, vmax=255, interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if i == 0:
                ax.set_title(expr)
            if j == 0:
                ax.set_ylabel(occ)
    fig.tight_layout()
    return _save(fig, Path(path))


def plot_curves(curves: Mapping[tuple[str, str], Sequence[tuple[int, float]]], expressions: Sequence[str],
                occlusion: str, path: str | Path) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4.5, 3.0))
    for expr in expressions:
        pts = curves[(expr, occlusion)]
        ax.plot([n for n, _ in pts], [a for _, a in pts], marker=".", label=expr)
    ax.set_xlabel("number of regions")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0.0, 1.02)
    ax.set_title(f"accuracy vs framework size ({occlusion})")
    ax.legend(fontsize=6, ncol=2)
    fig.tight_layout()
    return _save(fig, Path(path))


def plot_comparison(summary: Mapping[tuple[str, str], float], occlusions: Sequence[str], methods: Sequence[str],
                    path: str | Path) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5.0, 3.0))
    width = 0.8 / len(methods)
    x = np.arange(len(occlusions))
    for k, m in enumerate(methods):
        ax.bar(x + k * width, [summary[(o, m)] for o in occlusions], width, label=m)
    ax.set_xticks(x + width * (len(methods) - 1) / 2)
    ax.set_xticklabels(occlusions)
    ax.set_ylabel("fused accuracy")
    ax.set_ylim(0.0, 1.0)
    ax.legend(fontsize=6)
    fig.tight_layout()
    return _save(fig, Path(path))
