"""Figure rendering for report paths: every analysis command writes its
delimited tables plus matplotlib figures next to them."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluation import ConfusionMatrix
from .trainer import TrainingCurves

SEVERITY_NAMES = ("healthy", "mild", "mild-mod", "mod-severe", "severe")
DPI = 130


def save_curves_figure(path, curves: TrainingCurves, title: str = "training curves") -> None:
    """Two panels: classification loss and CTC loss, train vs validation."""
    epochs = curves.column("epoch")
    fig, axes = plt.subplots(1, 2, figsize=(9.5, 3.6))
    axes[0].plot(epochs, curves.column("train_ce"), label="train", lw=1.2)
    axes[0].plot(epochs, curves.column("valid_ce"), label="valid", lw=1.2)
    axes[0].set_title("classification loss")
    axes[1].plot(epochs, curves.column("train_ctc"), label="train", lw=1.2)
    axes[1].plot(epochs, curves.column("valid_ctc"), label="valid", lw=1.2)
    axes[1].set_title("ctc loss")
    for ax in axes:
        ax.set_xlabel("epoch")
        ax.legend(frameon=False)
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)


def save_comparison_figure(path, curves_by_name: dict[str, TrainingCurves]) -> None:
    """Overlayed validation losses for several runs (warmup sweeps,
    single-task vs multi-task)."""
    fig, axes = plt.subplots(1, 2, figsize=(9.5, 3.6))
    for name, curves in curves_by_name.items():
        epochs = curves.column("epoch")
        axes[0].plot(epochs, curves.column("valid_ce"), label=name, lw=1.2)
        axes[1].plot(epochs, curves.column("valid_ctc"), label=name, lw=1.2)
    axes[0].set_title("validation classification loss")
    axes[1].set_title("validation ctc loss")
    for ax in axes:
        ax.set_xlabel("epoch")
        ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)


def save_embedding_figure(path, coords: np.ndarray, labels: np.ndarray, label_kind: str) -> None:
    """Scatter of the 2D embedding, color-coded by severity or text id."""
    fig, ax = plt.subplots(figsize=(5.2, 4.4))
    labels = np.asarray(labels)
    for value in np.unique(labels):
        mask = labels == value
        if label_kind == "severity" and 0 <= int(value) < len(SEVERITY_NAMES):
            name = SEVERITY_NAMES[int(value)]
        else:
            name = f"{label_kind} {value}"
        ax.scatter(coords[mask, 0], coords[mask, 1], s=12, alpha=0.75, label=name)
    ax.set_title(f"latent embedding by {label_kind}")
    ax.set_xticks([])
    ax.set_yticks([])
    ax.legend(frameon=False, fontsize=8, loc="best")
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)


def save_confusion_figure(path, cm: ConfusionMatrix) -> None:
    fig, ax = plt.subplots(figsize=(4.8, 4.2))
    counts = cm.counts
    im = ax.imshow(counts, cmap="Blues")
    for i in range(counts.shape[0]):
        for j in range(counts.shape[1]):
            color = "white" if counts[i, j] > counts.max() / 2 else "black"
            ax.text(j, i, str(counts[i, j]), ha="center", va="center", color=color, fontsize=9)
    ax.set_xticks(range(5), SEVERITY_NAMES, rotation=45, ha="right", fontsize=8)
    ax.set_yticks(range(5), SEVERITY_NAMES, fontsize=8)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    fig.colorbar(im, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
