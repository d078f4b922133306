"""Report figures: loss curves, material map grids and per-channel metric bars.

Everything renders off-screen with the Agg backend straight to files.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import numpy as np
from matplotlib import pyplot as plt

from .render import MaterialMaps

STYLE = {
    "font.size": 8,
    "axes.labelsize": 8,
    "axes.titlesize": 8,
    "legend.fontsize": 7,
    "lines.linewidth": 1.0,
    "figure.dpi": 100,
    "savefig.dpi": 120,
}
# no timestamp or version in the file, so identical figures give identical bytes
PNG_METADATA = {"Software": None}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, format="png", metadata=PNG_METADATA)
    plt.close(fig)
    return path


def read_loss_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([int(r["step"]) for r in rows]), np.array([float(r["loss"]) for r in rows])


def loss_curve(curves: dict[str, str | Path], path: str | Path, smooth: int = 25) -> Path:
    """Plot one or more loss CSVs (``step,loss``) on a log axis with a running mean."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 2.8))
        for label, csv_path in curves.items():
            steps, loss = read_loss_csv(csv_path)
            (line,) = ax.plot(steps, loss, alpha=0.3)
            if len(loss) >= smooth > 1:
                kernel = np.ones(smooth) / smooth
                ax.plot(steps[smooth - 1 :], np.convolve(loss, kernel, mode="valid"), color=line.get_color(), label=label)
            else:
                line.set_label(label)
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend(frameon=False)
        return _save(fig, path)


def map_grid(rows: list[tuple[str, MaterialMaps, list[np.ndarray]]], path: str | Path) -> Path:
    """One row per material: the four maps followed by any number of renders."""
    if not rows:
        raise ValueError("nothing to plot")
    n_cols = 4 + max(len(r[2]) for r in rows)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(len(rows), n_cols, figsize=(1.3 * n_cols, 1.4 * len(rows)), squeeze=False)
        for i, (label, maps, renders) in enumerate(rows):
            panels = [("basecolor", maps.basecolor), ("normal", maps.normal),
                      ("roughness", maps.roughness[..., 0]), ("metallic", maps.metallic[..., 0])]
            panels += [(f"render {k}", img) for k, img in enumerate(renders)]
            for j, ax in enumerate(axes[i]):
                ax.set_axis_off()
                if j >= len(panels):
                    continue
                title, img = panels[j]
                ax.imshow(np.clip(img, 0, 1), cmap="gray", vmin=0, vmax=1, interpolation="nearest")
                if i == 0:
                    ax.set_title(title)
            axes[i][0].text(-0.1, 0.5, label, transform=axes[i][0].transAxes, rotation=90, ha="right", va="center")
        return _save(fig, path)


def channel_bars(values: dict[str, float], path: str | Path, ylabel: str = "MSE", thresholds: dict | None = None) -> Path:
    """Bar chart of a per-channel metric, with optional dashed threshold markers."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.5, 2.4))
        names = list(values)
        ax.bar(range(len(names)), [values[n] for n in names], color="#4eb3d3")
        for i, n in enumerate(names):
            if thresholds and n in thresholds:
                ax.hlines(thresholds[n], i - 0.4, i + 0.4, colors="k", linestyles="dashed")
        ax.set_xticks(range(len(names)), names, rotation=30)
        ax.set_ylabel(ylabel)
        return _save(fig, path)
