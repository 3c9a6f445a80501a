"""
Report figures rendered with matplotlib's Agg backend.

Each function writes one PNG next to the matching CSV. Figures are built
with ``matplotlib.figure.Figure`` directly so no GUI backend or global
pyplot state is involved.
"""

from __future__ import annotations

import io

import numpy as np
from matplotlib.figure import Figure
from matplotlib.ticker import MaxNLocator

from .nn.checkpoint import atomic_write_bytes

DPI = 110


def _save(fig: Figure, path) -> None:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=DPI, bbox_inches="tight")
    atomic_write_bytes(path, buf.getvalue())


def plot_history(history, path, title="Training") -> None:
    """Mean epoch loss and training accuracy against epoch."""
    epochs = [h["epoch"] for h in history]
    fig = Figure(figsize=(6, 3.5))
    ax = fig.add_subplot()
    ax.plot(epochs, [h["loss"] for h in history], marker="o", color="tab:blue")
    ax.set_xlabel("epoch")
    ax.xaxis.set_major_locator(MaxNLocator(integer=True))
    ax.set_ylabel("BCE loss", color="tab:blue")
    ax2 = ax.twinx()
    ax2.plot(epochs, [h["accuracy"] for h in history], marker="s", color="tab:orange")
    ax2.set_ylabel("train accuracy (%)", color="tab:orange")
    ax2.set_ylim(0, 100)
    ax.set_title(title)
    ax.grid(alpha=0.3)
    _save(fig, path)


def plot_confusion(metrics, path, title="Confusion matrix") -> None:
    counts = np.array([[metrics.tp, metrics.fn], [metrics.fp, metrics.tn]])
    fig = Figure(figsize=(3.8, 3.4))
    ax = fig.add_subplot()
    ax.imshow(counts, cmap="Blues")
    names = ["Abnormal", "Normal"]
    ax.set_xticks([0, 1], names)
    ax.set_yticks([0, 1], names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("truth")
    peak = counts.max() if counts.max() else 1
    for (i, j), v in np.ndenumerate(counts):
        ax.text(j, i, str(v), ha="center", va="center",
                color="white" if v > peak / 2 else "black")
    ax.set_title(title)
    _save(fig, path)


def plot_summary_bars(rows, path, title="") -> None:
    """Grouped bars of accuracy, sensitivity, specificity and MACC, one group per row."""
    from .report import SUMMARY_COLUMNS

    names = [r[0] for r in rows]
    values = np.array([r[1:] for r in rows], dtype=float)
    x = np.arange(len(rows))
    width = 0.8 / values.shape[1]
    fig = Figure(figsize=(max(6, 1.6 * len(rows)), 4))
    ax = fig.add_subplot()
    for k, col in enumerate(SUMMARY_COLUMNS):
        ax.bar(x + (k - 1.5) * width, values[:, k], width, label=col)
    ax.set_xticks(x, [n.replace(" with ", "\nwith ").replace(" without ", "\nwithout ")
                      for n in names], fontsize=8)
    ax.set_ylim(0, 100)
    ax.set_ylabel("%")
    ax.legend(fontsize=8, ncol=4, loc="lower center", bbox_to_anchor=(0.5, 1.0))
    if title:
        ax.set_title(title, pad=28)
    _save(fig, path)


def plot_segmentation(signal, sample_rate, starts, ends, path, probs=None) -> None:
    """Denoised recording with detected cycle boundaries (and per-cycle scores if given)."""
    t = np.arange(len(signal)) / sample_rate
    fig = Figure(figsize=(9, 3))
    ax = fig.add_subplot()
    ax.plot(t, signal, lw=0.5, color="0.3")
    for i, (s, e) in enumerate(zip(starts, ends)):
        ax.axvline(s / sample_rate, color="tab:green", lw=0.8)
        if probs is not None:
            ax.text((s + e) / 2 / sample_rate, ax.get_ylim()[1] * 0.9, f"{probs[i]:.2f}",
                    ha="center", fontsize=7,
                    color="tab:red" if probs[i] >= 0.5 else "tab:blue")
    ax.set_xlabel("time (s)")
    ax.set_title("Detected cycles")
    _save(fig, path)
