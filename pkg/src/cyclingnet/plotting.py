"""Figures written next to the delimited outputs of the CLI."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.fontsize": 8,
    "legend.frameon": False,
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_history(history: Sequence, path) -> Path:
    """Loss and accuracy per epoch for the training and validation splits."""
    epochs = [r.epoch for r in history]
    with plt.rc_context(STYLE):
        fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(8, 3))
        ax_loss.plot(epochs, [r.train_loss for r in history], label="train")
        ax_loss.plot(epochs, [r.val_loss for r in history], label="validation")
        ax_loss.set_xlabel("epoch")
        ax_loss.set_ylabel("cross-entropy")
        ax_loss.legend()
        ax_acc.plot(epochs, [r.train_acc for r in history], label="train")
        ax_acc.plot(epochs, [r.val_acc for r in history], label="validation")
        ax_acc.set_xlabel("epoch")
        ax_acc.set_ylabel("accuracy")
        ax_acc.set_ylim(0, 1.02)
        ax_acc.legend()
        return _save(fig, path)


def plot_sweep(reports: Sequence, path) -> Path:
    thresholds = [r.threshold for r in reports]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        for attr, label in (("precision", "precision"), ("recall", "recall"),
                            ("false_positive_rate", "false-positive rate"), ("f1", "F1")):
            ax.plot(thresholds, [getattr(r, attr) for r in reports], marker=".", label=label)
        ax.set_xlabel("decision threshold")
        ax.set_ylim(-0.02, 1.02)
        ax.legend(loc="best")
        return _save(fig, path)


def plot_predictions(records: Sequence, path, threshold: float = 0.5, max_clips: int = 6) -> Path:
    """Per-frame probability timeline for up to ``max_clips`` clips."""
    by_clip = defaultdict(list)
    for r in records:
        by_clip[r.clip_id].append(r)
    clips = list(by_clip)[:max_clips] or ["(none)"]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(len(clips), 1, figsize=(7, 1.6 * len(clips) + 0.4), squeeze=False)
        for ax, clip in zip(axes[:, 0], clips):
            rows = by_clip.get(clip, [])
            idx = [r.frame_index for r in rows]
            ax.plot(idx, [r.probability for r in rows], color="C0", label="probability")
            labelled = [(r.frame_index, r.label) for r in rows if r.label is not None]
            if labelled:
                ax.fill_between([i for i, _ in labelled], 0, [lab for _, lab in labelled],
                                step="mid", color="C3", alpha=0.2, label="near miss (label)")
            ax.axhline(threshold, color="0.4", lw=0.8, ls="--")
            ax.set_ylim(-0.02, 1.02)
            ax.set_ylabel(clip, rotation=0, ha="right", va="center")
        axes[-1, 0].set_xlabel("frame index")
        axes[0, 0].legend(loc="upper right")
        return _save(fig, path)
