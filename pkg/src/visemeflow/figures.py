"""Grayscale matplotlib renderings of evaluation artifacts.

Everything draws through the Agg backend so headless runs work, and sticks
to gray colormaps to match the single-channel pipeline.  These figures sit
next to the CSV/PGM artifacts; nothing downstream parses them.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import DataError
from .evaluation import ConfusionMatrix, FeatureMaps


def save_confusion_figure(cm: ConfusionMatrix, path) -> None:
    k = len(cm.labels)
    fig, ax = plt.subplots(figsize=(max(4.0, 0.5 * k + 2), max(3.5, 0.5 * k + 1.5)))
    ax.imshow(cm.counts, cmap="gray_r", interpolation="nearest")
    ax.set_xticks(range(k), cm.labels, rotation=45, ha="right")
    ax.set_yticks(range(k), cm.labels)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    if k <= 12:
        # annotate counts while they are still readable
        peak = cm.counts.max() if cm.counts.size else 0
        for i in range(k):
            for j in range(k):
                v = int(cm.counts[i, j])
                ax.text(
                    j, i, str(v), ha="center", va="center", fontsize=8,
                    color="white" if peak and v > peak / 2 else "black",
                )
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def save_feature_map_grid(fm: FeatureMaps, path, cols: int = 8) -> None:
    n = fm.maps.shape[0]
    cols = min(cols, n)
    rows = (n + cols - 1) // cols
    fig, axes = plt.subplots(
        rows, cols, figsize=(1.2 * cols, 1.2 * rows), squeeze=False
    )
    for idx in range(rows * cols):
        ax = axes[idx // cols][idx % cols]
        ax.set_axis_off()
        if idx < n:
            ax.imshow(fm.maps[idx], cmap="gray", vmin=0.0, vmax=1.0)
            ax.set_title(f"{idx}", fontsize=6)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def save_reconstruction_figure(originals, reconstructions, path, limit: int = 8) -> None:
    """Originals on the top row, reconstructions below them."""
    a = np.asarray(originals)
    b = np.asarray(reconstructions)
    if a.shape != b.shape:
        raise DataError(
            f"original and reconstruction stacks differ: {a.shape} vs {b.shape}"
        )
    n = min(limit, a.shape[0])
    fig, axes = plt.subplots(2, n, figsize=(1.5 * n, 3.2), squeeze=False)
    for i in range(n):
        for row, stack in ((0, a), (1, b)):
            ax = axes[row][i]
            ax.imshow(stack[i, 0], cmap="gray", vmin=0.0, vmax=1.0)
            ax.set_axis_off()
    axes[0][0].set_title("input", fontsize=8)
    axes[1][0].set_title("reconstruction", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def save_loss_curve(history, path) -> None:
    """Training-loss and validation-metric traces from checkpoint history."""
    if not history:
        raise DataError("no history rows to plot")
    epochs = [row["epoch"] for row in history]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(epochs, [row["train_loss"] for row in history],
            color="black", label="train loss")
    ax2 = ax.twinx()
    ax2.plot(epochs, [row["val_metric"] for row in history],
             color="0.45", linestyle="--", label="val metric")
    ax.set_xlabel("epoch")
    ax.set_ylabel("train loss")
    ax2.set_ylabel("val metric", color="0.45")
    lines = ax.get_lines() + ax2.get_lines()
    ax.legend(lines, [ln.get_label() for ln in lines], fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
