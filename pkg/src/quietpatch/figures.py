"""PNG figure emission for reports: heatmaps, overlays, histograms."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch


def save_heatmap(values: torch.Tensor, path, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(4, 4), dpi=120)
    im = ax.imshow(values.numpy(), cmap="inferno", vmin=0)
    ax.set_title(title)
    ax.axis("off")
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.savefig(Path(path), bbox_inches="tight")
    plt.close(fig)


def save_histogram(summary: dict, path, title: str = "") -> None:
    edges = np.asarray(summary["bin_edges"])
    counts = np.asarray(summary["counts"])
    fig, ax = plt.subplots(figsize=(5, 3), dpi=120)
    ax.stairs(counts, edges, fill=True)
    eps = summary.get("eps")
    if eps is not None:
        ax.axvline(eps, color="red", linestyle="--", linewidth=1)
        ax.axvline(-eps, color="red", linestyle="--", linewidth=1)
    ax.set_title(title)
    ax.set_xlabel("pixel difference")
    ax.set_ylabel("count")
    fig.tight_layout()
    fig.savefig(Path(path))
    plt.close(fig)
