"""Static figures for evaluation reports and attention inspection."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

LABELS = {
    "angular_loss": "angular loss per patch",
    "rmse": "RMSE per patch",
    "balanced_accuracy": "balanced accuracy per patch",
    "point_angular_loss": "angular loss per point",
}


def plot_histograms(histograms: dict, out_dir, stem: str = "metrics") -> list[Path]:
    """One bar chart per histogram in a MetricsReport; returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, hist in histograms.items():
        edges = np.asarray(hist["edges"])
        counts = np.asarray(hist["counts"])
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.bar(edges[:-1], counts, width=np.diff(edges), align="edge", color="#4c72b0", edgecolor="none")
        ax.set_xlabel(LABELS.get(name, name))
        ax.set_ylabel("count")
        ax.set_xlim(edges[0], edges[-1])
        fig.tight_layout()
        path = out_dir / f"{stem}_{name}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written


def plot_attention(points: np.ndarray, weights: np.ndarray, query: int, path) -> Path:
    """Scatter the patch coloured by one attention row, the query point marked."""
    pts = np.asarray(points)
    # view along the smallest principal axis so a surface patch is seen face-on
    centred = pts - pts.mean(axis=0)
    _, _, vt = np.linalg.svd(centred, full_matrices=False)
    uv = centred @ vt[:2].T
    fig, ax = plt.subplots(figsize=(5, 4.5))
    sc = ax.scatter(uv[:, 0], uv[:, 1], c=weights, s=8, cmap="viridis")
    ax.scatter(uv[query, 0], uv[query, 1], marker="x", s=60, c="red")
    ax.set_aspect("equal")
    ax.set_xticks([])
    ax.set_yticks([])
    fig.colorbar(sc, ax=ax, label="attention weight")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
