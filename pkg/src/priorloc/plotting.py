"""Report figures (PNG, Agg backend).

Figures are diagnostics written next to the machine-readable outputs; they
are not part of any checksum.
"""

from __future__ import annotations

import math

import numpy as np
import matplotlib

matplotlib.use("Agg")
from matplotlib.figure import Figure  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}


def figsize(width=6.0, ratio=None):
    if ratio is None:
        ratio = (math.sqrt(5.0) - 1.0) / 2.0
    return (width, width * ratio)


def _new(width=6.0, ratio=None, ncols=1):
    with matplotlib.rc_context(STYLE):
        fig = Figure(figsize=figsize(width, ratio))
        axes = fig.subplots(1, ncols)
    return fig, axes


def _save(fig, path):
    with matplotlib.rc_context(STYLE):
        fig.tight_layout()
        fig.savefig(path)


def plot_distance_histogram(distances, threshold, path, report=None):
    """Histogram of per-point cloud-to-cloud distances with the rejection line."""
    d = np.asarray(distances, dtype=np.float64)
    fig, ax = _new()
    kept = d[d <= threshold]
    bins = np.linspace(0.0, threshold, 51)
    ax.hist(kept, bins=bins, color="0.35")
    ax.axvline(threshold, color="tab:red", lw=1, ls="--", label=f"threshold {threshold:g} m")
    if report is not None:
        ax.axvline(report.mean_error, color="tab:blue", lw=1, label=f"mean {report.mean_error:.4f} m")
    ax.set_xlabel("distance to prior map (m)")
    ax.set_ylabel("points")
    ax.legend(frameon=False)
    _save(fig, path)


def plot_trajectory(trajectory, ground_truth, path):
    """Top view of the estimated and true paths plus per-pose error."""
    fig, (top, err) = _new(width=9.0, ratio=0.4, ncols=2)
    est = np.array([T.translation for _, T in trajectory]) if trajectory else np.zeros((0, 3))
    top.plot(est[:, 0], est[:, 1], color="tab:blue", lw=1, label="estimate")
    if ground_truth:
        gt = np.array([T.translation for _, T in ground_truth])
        top.plot(gt[:, 0], gt[:, 1], color="0.5", lw=1, ls="--", label="truth")
        n = min(len(est), len(gt))
        t = np.array([s for s, _ in trajectory[:n]])
        err.plot(t, np.linalg.norm(est[:n] - gt[:n], axis=1), color="tab:blue", lw=1)
    err.set_xlabel("time (s)")
    err.set_ylabel("translation error (m)")
    top.set_aspect("equal", adjustable="datalim")
    top.set_xlabel("x (m)")
    top.set_ylabel("y (m)")
    top.legend(frameon=False)
    _save(fig, path)


def plot_grid_layers(grid, path, names=("elevation", "slope", "roughness", "traversability")):
    """Side-by-side rasters of the named grid layers; no-data is left blank."""
    names = [n for n in names if n in grid]
    fig, axes = _new(width=3.2 * max(len(names), 1), ratio=0.9 / max(len(names), 1), ncols=max(len(names), 1))
    axes = np.atleast_1d(axes)
    lo = grid.min_corner
    extent = [lo[0], lo[0] + grid.width * grid.cell_size, lo[1], lo[1] + grid.height * grid.cell_size]
    for ax, name in zip(axes, names):
        im = ax.imshow(np.ma.masked_invalid(grid[name]), origin="lower", extent=extent,
                       cmap="viridis" if name != "traversability" else "RdYlGn_r")
        ax.set_title(name)
        fig.colorbar(im, ax=ax, shrink=0.8)
    _save(fig, path)
