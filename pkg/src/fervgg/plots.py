"""Report figures rendered next to the tab-separated outputs.

Figures are built on ``matplotlib.figure.Figure`` directly (no pyplot
state), so rendering works headless and is safe inside sweeps.
"""

from __future__ import annotations

from typing import Dict, Sequence

import numpy as np
from matplotlib.figure import Figure

from .data import CLASS_NAMES

FIGSIZE = (6.4, 4.0)


def _save(fig: Figure, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=120)


def learning_curves(metrics, path) -> None:
    """Loss, accuracies and learning rate per epoch."""
    epochs = [m.epoch for m in metrics]
    fig = Figure(figsize=(9.6, 3.4))
    ax_loss, ax_acc, ax_lr = fig.subplots(1, 3)
    ax_loss.plot(epochs, [m.train_loss for m in metrics], color="tab:red")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("train loss")
    ax_acc.plot(epochs, [m.train_acc for m in metrics], label="train (crops)")
    ax_acc.plot(epochs, [m.val_acc for m in metrics], label="validation (ten-crop)")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy")
    ax_acc.legend(frameon=False, fontsize=8)
    ax_lr.plot(epochs, [m.lr for m in metrics], color="tab:gray")
    ax_lr.set_yscale("log")
    ax_lr.set_xlabel("epoch")
    ax_lr.set_ylabel("learning rate")
    _save(fig, path)


def confusion_matrix(counts: np.ndarray, path, normalize: bool = True) -> None:
    """Heat map with row-normalized rates (rows = true class) and raw counts as text."""
    counts = np.asarray(counts)
    rows = counts.sum(axis=1, keepdims=True)
    rates = np.divide(counts, rows, out=np.zeros(counts.shape), where=rows > 0) if normalize else counts
    fig = Figure(figsize=(5.6, 5.0))
    ax = fig.subplots()
    im = ax.imshow(rates, cmap="Blues", vmin=0, vmax=1 if normalize else None)
    n = counts.shape[0]
    names = CLASS_NAMES[:n] if n <= len(CLASS_NAMES) else [str(i) for i in range(n)]
    ax.set_xticks(range(n), names, rotation=45, ha="right")
    ax.set_yticks(range(n), names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    for i in range(n):
        for j in range(n):
            ax.text(j, i, f"{rates[i, j]:.2f}" if normalize else str(counts[i, j]),
                    ha="center", va="center", fontsize=7,
                    color="white" if rates[i, j] > 0.5 * (rates.max() or 1) else "black")
    fig.colorbar(im, ax=ax, fraction=0.046)
    _save(fig, path)


def sweep_bars(rows: Sequence[Dict[str, str]], axis: str, path) -> None:
    """Grouped bars: per optimizer (constant vs decaying lr), or per scheduler (validation vs test)."""
    def num(v):
        try:
            return float(v)
        except (TypeError, ValueError):
            return np.nan

    fig = Figure(figsize=FIGSIZE)
    ax = fig.subplots()
    if axis == "optimizer":
        groups = list(dict.fromkeys(r["optimizer"] for r in rows))
        series = {"constant": "constant lr", "rlrp": "decaying lr (plateau)"}
        colors = {"constant": "gold", "rlrp": "darkorange"}
        keyed = {(r["optimizer"], r["scheduler"]): num(r["best_val_acc"]) for r in rows}
        width = 0.38
        for k, (sched, label) in enumerate(series.items()):
            vals = [keyed.get((g, sched), np.nan) for g in groups]
            ax.bar(np.arange(len(groups)) + (k - 0.5) * width, vals, width, label=label, color=colors[sched])
        ax.set_ylabel("validation accuracy")
    else:
        groups = [r["scheduler"] for r in rows]
        width = 0.38
        x = np.arange(len(groups))
        ax.bar(x - width / 2, [num(r["best_val_acc"]) for r in rows], width, label="validation", color="seagreen")
        ax.bar(x + width / 2, [num(r["test_acc"]) for r in rows], width, label="test", color="steelblue")
        ax.set_ylabel("accuracy")
    ax.set_xticks(range(len(groups)), groups, rotation=30, ha="right")
    ax.legend(frameon=False, fontsize=8)
    _save(fig, path)


def saliency_triptych(original: np.ndarray, sal_map: np.ndarray, overlay: np.ndarray, path,
                      title: str = "") -> None:
    fig = Figure(figsize=(7.2, 2.6))
    axes = fig.subplots(1, 3)
    axes[0].imshow(original, cmap="gray", vmin=0, vmax=1)
    axes[1].imshow(sal_map, cmap="jet", vmin=0, vmax=1)
    axes[2].imshow(overlay)
    for ax, name in zip(axes, ("original", "saliency", "overlay")):
        ax.set_title(name, fontsize=9)
        ax.axis("off")
    if title:
        fig.suptitle(title, fontsize=10)
    _save(fig, path)
