"""Matplotlib renderings of the delimited outputs.

Each report a command writes as CSV gets a PNG next to it: the per-frame
gate trace and the per-epoch training curves.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def plot_gate_trace(records, path, title: str | None = None) -> None:
    """Line plot of mean gate activation per frame with the 0.5 midline."""
    fig, ax = plt.subplots(figsize=(7, 3.2))
    ax.plot([r.t for r in records], [r.mean_gate for r in records], lw=1.2)
    ax.axhline(0.5, color="gray", ls="--", lw=0.8)
    ax.set_xlabel("frame")
    ax.set_ylabel("mean gate activation")
    ax.set_ylim(0.0, 1.0)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_training_curves(metrics, path) -> None:
    """Loss and frame accuracy per epoch, one line per split."""
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9, 3.2))
    for split in ("train", "eval"):
        rows = [m for m in metrics if m.split == split]
        if not rows:
            continue
        epochs = [m.epoch for m in rows]
        ax_loss.plot(epochs, [m.loss for m in rows], label=split)
        ax_acc.plot(epochs, [m.accuracy for m in rows], label=split)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.legend()
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("frame accuracy")
    ax_acc.set_ylim(0.0, 1.0)
    ax_acc.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
