"""Figure rendering for training, calibration, and evaluation artifacts.

Every function writes a PNG next to the delimited data it illustrates. The
Agg backend keeps rendering headless, and PNG metadata is stripped so equal
runs produce byte-equal files.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from stereoface.classifier import EpochStats, ThresholdSweep

_SAVE_KW = {"dpi": 110, "metadata": {"Software": None}}


def save_loss_curves(stats: list[EpochStats], path: str) -> None:
    """Training and validation loss per epoch, with accuracies alongside."""
    epochs = [s.epoch for s in stats]
    fig, (ax_loss, ax_acc) = plt.subplots(2, 1, figsize=(6.0, 6.0), sharex=True)
    ax_loss.plot(epochs, [s.train_loss for s in stats], label="train", color="tab:blue")
    ax_loss.plot(epochs, [s.val_loss for s in stats], label="validation", color="tab:orange")
    ax_loss.set_ylabel("BCE loss")
    ax_loss.legend()
    ax_loss.grid(alpha=0.3)
    ax_acc.plot(epochs, [s.train_acc for s in stats], label="train", color="tab:blue")
    ax_acc.plot(epochs, [s.val_acc for s in stats], label="validation", color="tab:orange")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy @ 0.5")
    ax_acc.set_ylim(0.0, 1.02)
    ax_acc.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def save_threshold_curves(sweep: ThresholdSweep, path: str, selected: float | None = None) -> None:
    """Accuracy, precision, and error rates across decision thresholds."""
    ts = [p.threshold for p in sweep.points]
    fig, ax = plt.subplots(figsize=(6.5, 4.2))
    ax.plot(ts, [p.accuracy for p in sweep.points], label="accuracy", color="tab:blue")
    ax.plot(ts, [p.precision for p in sweep.points], label="precision", color="tab:green")
    ax.plot(ts, [p.fpr for p in sweep.points], label="spoofs accepted (FPR)",
            color="tab:red", linestyle="--")
    ax.plot(ts, [p.fnr for p in sweep.points], label="reals rejected (FNR)",
            color="tab:purple", linestyle="--")
    if selected is not None:
        ax.axvline(selected, color="black", linewidth=1.0, label=f"chosen {selected:g}")
    ax.set_xlabel("decision threshold")
    ax.set_ylabel("rate")
    ax.set_xlim(0.0, 1.0)
    ax.set_ylim(-0.02, 1.02)
    ax.grid(alpha=0.3)
    ax.legend(loc="center left", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def save_confusion_matrix(matrix: np.ndarray, labels: list[str], path: str) -> None:
    """Annotated predicted-by-true count matrix."""
    m = np.asarray(matrix)
    n = len(labels)
    fig, ax = plt.subplots(figsize=(1.1 * n + 2.2, 1.0 * n + 1.8))
    ax.imshow(m, cmap="Blues")
    for i in range(n):
        for j in range(n):
            color = "white" if m[i, j] > m.max() / 2 else "black"
            ax.text(j, i, str(int(m[i, j])), ha="center", va="center", color=color)
    ax.set_xticks(range(n), labels)
    ax.set_yticks(range(n), [f"Predicted {name}" for name in labels])
    ax.set_xlabel("true class")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
