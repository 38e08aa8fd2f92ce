"""
Optional figures rendered from exported CSV/JSONL data.

The data files are the contract; these are convenience renderings.
"""

from pathlib import Path
from typing import Any, Mapping, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

PathLike = Union[str, Path]


def _save(fig, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_distance_heatmap(distances: np.ndarray, path: PathLike, steady_step: int) -> Path:
    """Token position x iteration heatmap of the distance to the steady state."""
    fig, ax = plt.subplots(figsize=(8, 5))
    image = ax.imshow(distances, aspect="auto", origin="lower", cmap="viridis",
                      extent=(0.5, distances.shape[1] + 0.5, -0.5, distances.shape[0] - 0.5))
    ax.set_xlabel("iteration")
    ax.set_ylabel("token position")
    ax.set_title(f"||s_t - s_{steady_step}||")
    fig.colorbar(image, ax=ax)
    return _save(fig, path)


def plot_norm_diff(curves: np.ndarray, path: PathLike) -> Path:
    fig, ax = plt.subplots(figsize=(8, 4))
    iterations = np.arange(2, curves.shape[1] + 2)
    for row in curves:
        ax.plot(iterations, row, alpha=0.4, linewidth=0.8)
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("norm_diff")
    return _save(fig, path)


def plot_trajectories(projected: np.ndarray, path: PathLike) -> Path:
    """2-D principal-component trajectories, one line per token position."""
    fig, ax = plt.subplots(figsize=(6, 6))
    for i, traj in enumerate(projected):
        ys = traj[:, 1] if traj.shape[1] > 1 else np.zeros(len(traj))
        ax.plot(traj[:, 0], ys, marker=".", markersize=3, linewidth=0.8, alpha=0.6)
        ax.scatter(traj[-1, 0], ys[-1], s=10)
    ax.set_xlabel("pc1")
    ax.set_ylabel("pc2")
    return _save(fig, path)


def plot_accuracy_vs_r(rows: Sequence[Mapping[str, Any]], path: PathLike) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    variants = sorted({row.get("variant", "model") for row in rows})
    for variant in variants:
        picked = sorted((row for row in rows if row.get("variant", "model") == variant), key=lambda row: row["r"])
        ax.plot([row["r"] for row in picked], [100 * row["accuracy"] for row in picked], marker="o", label=variant)
    ax.set_xlabel("recurrence depth r")
    ax.set_ylabel("accuracy (%)")
    ax.legend()
    return _save(fig, path)


def plot_exit_histograms(rows: Sequence[Mapping[str, Any]], path: PathLike) -> Path:
    fig, ax = plt.subplots(figsize=(7, 4))
    for row in rows:
        hist = np.asarray(row["histogram"])
        ax.step(np.arange(1, len(hist) + 1), hist, where="mid",
                label=f"{row['benchmark']} (mean {row['mean_steps']:.1f})")
    ax.set_xlabel("exit step")
    ax.set_ylabel("tokens")
    ax.legend()
    return _save(fig, path)
