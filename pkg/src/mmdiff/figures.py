"""Figure rendering for training logs and sample sheets.

Everything renders straight to files with the Agg backend; nothing here
opens a window. Paths are returned so callers can report what was written.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

import torch  # noqa: E402


def loss_curve(log_csv, out_path) -> Path:
    """Plot the loss column of a training log CSV against its step column."""
    steps, losses = [], []
    with open(log_csv, newline="") as f:
        for row in csv.DictReader(f):
            steps.append(int(row["step"]))
            losses.append(float(row["loss"]))
    if not steps:
        raise ValueError(f"no rows in training log {log_csv}")
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, losses, lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def image_grid(images: list[torch.Tensor], out_path, titles: list[str] | None = None, ncols: int = 8) -> Path:
    """Tile [-1, 1] image tensors into one sheet."""
    if not images:
        raise ValueError("no images to render")
    n = len(images)
    ncols = min(ncols, n)
    nrows = (n + ncols - 1) // ncols
    fig, axes = plt.subplots(nrows, ncols, figsize=(1.6 * ncols, 1.8 * nrows), squeeze=False)
    for i in range(nrows * ncols):
        ax = axes[i // ncols][i % ncols]
        ax.axis("off")
        if i < n:
            ax.imshow(((images[i].clamp(-1, 1) + 1) / 2).permute(1, 2, 0).numpy())
            if titles is not None:
                ax.set_title(titles[i], fontsize=7)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
