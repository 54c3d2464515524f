"""Matplotlib renderers for the CLI report paths.

Figures are written next to the delimited text reports: a loss curve for
training runs, per-path score histograms for evaluations, and mask-grid
panels for the token-selection dumps. Headless backend, fixed dpi and
metadata so output bytes do not wobble between runs.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_SAVE_KW = {"dpi": 120, "metadata": {"Software": "mavit"}}


def save_loss_curve(trace: list[float], path) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(np.arange(1, len(trace) + 1), trace, lw=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title("training loss")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def save_score_hist(scores_by_path: dict[str, tuple[np.ndarray, np.ndarray]], path) -> None:
    n = len(scores_by_path)
    fig, axes = plt.subplots(1, n, figsize=(4 * n, 3.2), squeeze=False)
    bins = np.linspace(0.0, 1.0, 21)
    for ax, (name, (scores, labels)) in zip(axes[0], sorted(scores_by_path.items())):
        ax.hist(scores[labels == 1], bins=bins, alpha=0.6, label="bonafide")
        ax.hist(scores[labels == 0], bins=bins, alpha=0.6, label="attack")
        ax.set_title(name)
        ax.set_xlabel("score")
        ax.legend(fontsize=8)
    axes[0][0].set_ylabel("count")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def save_mask_panel(grids: dict[str, np.ndarray], path) -> None:
    """One row per named mask family, one column per head.

    ``grids`` maps a row label to an (heads, side, side) binary array.
    """
    rows = sorted(grids)
    heads = grids[rows[0]].shape[0]
    fig, axes = plt.subplots(
        len(rows), heads, figsize=(1.6 * heads, 1.6 * len(rows)), squeeze=False
    )
    for r, name in enumerate(rows):
        for h in range(heads):
            ax = axes[r][h]
            ax.imshow(grids[name][h], cmap="gray_r", vmin=0, vmax=1)
            ax.set_xticks([])
            ax.set_yticks([])
            if r == 0:
                ax.set_title(f"head {h}", fontsize=8)
        axes[r][0].set_ylabel(name, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
