"""SVG figures: trajectory overlays, end-location hexbin density, histograms with a KDE curve."""

from __future__ import annotations

from dataclasses import dataclass

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from scipy.stats import gaussian_kde  # noqa: E402

plt.rcParams["svg.hashsalt"] = "permanence"  # stable element ids across runs
plt.rcParams["svg.fonttype"] = "none"

HEXBIN_GRID = 40


def _save(fig, path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_trajectories(observed, truth, predictions: dict, path, title: str = "") -> None:
    """Observed path, ground-truth continuation and one line per model.

    Each line carries an SVG group id: ``observed``, ``truth``, ``pred-<name>``.
    """
    fig, ax = plt.subplots(figsize=(5, 5))
    obs = np.asarray(observed)
    tru = np.asarray(truth)
    (line,) = ax.plot(obs[:, 0], obs[:, 1], color="black", lw=2, label="observed")
    line.set_gid("observed")
    (line,) = ax.plot(tru[:, 0], tru[:, 1], color="tab:green", lw=1.5, ls="--", label="ground truth")
    line.set_gid("truth")
    ax.scatter([tru[-1, 0]], [tru[-1, 1]], color="tab:green", marker="*", s=80, zorder=3)
    for name, traj in predictions.items():
        traj = np.asarray(traj)
        (line,) = ax.plot(traj[:, 0], traj[:, 1], lw=1.2, label=name)
        line.set_gid(f"pred-{name}")
        ax.scatter([traj[-1, 0]], [traj[-1, 1]], color=line.get_color(), marker="x", zorder=3)
    ax.set_aspect("equal", adjustable="datalim")
    ax.set_xlabel("x (m, normalized)")
    ax.set_ylabel("y (m, normalized)")
    if title:
        ax.set_title(title)
    legend = ax.legend(loc="best", fontsize="small")
    legend.set_gid("legend")
    _save(fig, path)


@dataclass
class HexbinCells:
    centers: np.ndarray  # (k, 2) centers of non-empty cells
    counts: np.ndarray
    cell_width: float
    cell_height: float


def plot_hexbin(end_points, path, bounds, fov=None, gridsize: int = HEXBIN_GRID) -> HexbinCells:
    """Density of end locations on a ``gridsize`` x ``gridsize`` hexagonal grid over ``bounds``.

    With ``fov`` given, only end points outside that origin-centered rectangle
    are binned and the rectangle is outlined.
    """
    pts = np.asarray(end_points, dtype=np.float64).reshape(-1, 2)
    xmin, xmax, ymin, ymax = bounds
    if fov is not None:
        w, h = fov
        pts = pts[(np.abs(pts[:, 0]) > w / 2) | (np.abs(pts[:, 1]) > h / 2)]
    if len(pts) == 0:
        raise ValueError("no end locations to bin")
    fig, ax = plt.subplots(figsize=(6, 4.5))
    coll = ax.hexbin(
        pts[:, 0], pts[:, 1], gridsize=(gridsize, gridsize), extent=(xmin, xmax, ymin, ymax), mincnt=1, cmap="viridis"
    )
    coll.set_gid("hexbin")
    fig.colorbar(coll, ax=ax, label="trials")
    if fov is not None:
        rect = plt.Rectangle((-w / 2, -h / 2), w, h, fill=False, ec="red", lw=1.2, label="wrist view")
        rect.set_gid("fov")
        ax.add_patch(rect)
        ax.legend(loc="upper right", fontsize="small")
    ax.set_xlim(xmin, xmax)
    ax.set_ylim(ymin, ymax)
    ax.set_aspect("equal")
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    _save(fig, path)
    return HexbinCells(
        np.asarray(coll.get_offsets()),
        np.asarray(coll.get_array()),
        (xmax - xmin) / gridsize,
        (ymax - ymin) / gridsize,
    )


def plot_histogram(values, path, xlabel: str, bins: int = 30) -> None:
    """Density histogram with a Gaussian KDE overlay (group id ``kde``)."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("cannot draw a histogram of an empty dataset")
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.hist(v, bins=bins, density=True, color="tab:blue", alpha=0.5, label="trials")
    if v.size > 1 and np.ptp(v) > 0:
        xs = np.linspace(v.min(), v.max(), 256)
        (line,) = ax.plot(xs, gaussian_kde(v)(xs), color="tab:red", lw=1.5, label="KDE")
        line.set_gid("kde")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("density")
    ax.legend(fontsize="small")
    _save(fig, path)
