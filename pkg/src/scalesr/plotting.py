"""Static figures: scenario grids, LR inputs, PIT histograms and loss curves."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

CMAP = "Blues"


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
    return path


def scenario_grid(path, det_mean, members, target, scale=1.0, units="mm/h"):
    """``T`` rows by ``1 + K + 1`` columns: deterministic mean, K scenarios, truth.

    Returns ``(rows, cols)`` of the panel layout.
    """
    det_mean = np.asarray(det_mean) * scale
    members = np.asarray(members) * scale
    target = np.asarray(target) * scale
    k, t = members.shape[:2]
    cols = 1 + k + 1
    vmax = max(float(target.max()), float(det_mean.max()), float(members.max()), 1e-12)
    fig, axes = plt.subplots(t, cols, figsize=(2.2 * cols, 2.2 * t), squeeze=False)
    titles = ["deterministic"] + [f"scenario {i + 1}" for i in range(k)] + ["ground truth"]
    for row in range(t):
        panels = [det_mean[row]] + [members[i, row] for i in range(k)] + [target[row]]
        for col, img in enumerate(panels):
            ax = axes[row, col]
            im = ax.imshow(img, cmap=CMAP, vmin=0, vmax=vmax)
            ax.set_xticks([])
            ax.set_yticks([])
            if row == 0:
                ax.set_title(titles[col], fontsize=9)
            if col == 0:
                ax.set_ylabel(f"t+{row}", fontsize=9)
    fig.colorbar(im, ax=axes, shrink=0.8, label=units)
    _save(fig, path)
    return t, cols


def inputs_panel(path, lr_context, topography, scale=1.0, units="mm/h"):
    """LR context frames (oldest first) next to the topography channel."""
    lr = np.asarray(lr_context) * scale
    n = lr.shape[0]
    fig, axes = plt.subplots(1, n + 1, figsize=(2.2 * (n + 1), 2.4), squeeze=False)
    for i in range(n):
        axes[0, i].imshow(lr[i], cmap=CMAP, vmin=0, vmax=max(lr.max(), 1e-12))
        axes[0, i].set_title(f"LR t-{n - 1 - i}", fontsize=9)
    axes[0, n].imshow(topography, cmap="terrain")
    axes[0, n].set_title("topography", fontsize=9)
    for ax in axes[0]:
        ax.set_xticks([])
        ax.set_yticks([])
    return _save(fig, path)


def pit_histogram_plot(path, hist):
    hist = np.asarray(hist, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(4, 3))
    edges = np.linspace(0, 1, hist.size + 1)
    ax.bar(edges[:-1], hist, width=1 / hist.size, align="edge", edgecolor="k", color="0.7")
    ax.axhline(1 / hist.size, color="r", ls="--", lw=1)
    ax.set_xlabel("PIT")
    ax.set_ylabel("proportion")
    return _save(fig, path)


def loss_curves(path, rows):
    """Train and validation losses per stage from ``record.jsonl`` rows."""
    stages = sorted({r["stage"] for r in rows})
    fig, axes = plt.subplots(1, len(stages), figsize=(4 * len(stages), 3), squeeze=False)
    for ax, stage in zip(axes[0], stages):
        sel = [r for r in rows if r["stage"] == stage]
        ep = [r["epoch"] for r in sel]
        ax.plot(ep, [r["train_loss"] for r in sel], label="train")
        ax.plot(ep, [r["val_loss"] for r in sel], label="validation")
        ax.set_yscale("log")
        ax.set_title(stage)
        ax.set_xlabel("epoch")
        ax.legend(fontsize=8)
    return _save(fig, path)
