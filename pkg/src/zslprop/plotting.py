"""Figures written next to the CSV/JSON outputs.

Uses ``matplotlib.figure.Figure`` directly so no pyplot global state or
interactive backend is involved.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from matplotlib.figure import Figure

GOLDEN = (math.sqrt(5) - 1.0) / 2.0

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def new_figure(width=5.0, height=None, **subplot_kw):
    import matplotlib as mpl

    with mpl.rc_context(STYLE):
        fig = Figure(figsize=(width, height or width * GOLDEN), dpi=120)
        ax = fig.add_subplot(1, 1, 1, **subplot_kw)
    return fig, ax


def save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    return path


def plot_fold_accuracy(report, path) -> Path:
    """Bar per fold with that fold's chance level as a tick mark."""
    fig, ax = new_figure()
    idx = np.arange(len(report.folds))
    acc = report.accuracies
    ax.bar(idx, acc, color="#4c72b0", width=0.6, label="accuracy")
    chance = [1.0 / len(f.unseen_ids) for f in report.folds]
    ax.scatter(idx, chance, marker="_", s=400, color="#c44e52", label="chance", zorder=3)
    if report.mean_accuracy is not None:
        ax.axhline(report.mean_accuracy, color="0.3", ls="--", lw=1,
                   label=f"mean {report.mean_accuracy:.3f}")
    ax.set_xticks(idx)
    ax.set_xticklabels([f"fold {f.index}" for f in report.folds])
    ax.set_ylim(0, 1)
    ax.set_ylabel("unseen-class accuracy")
    ax.legend(frameon=False, fontsize=8)
    return save(fig, path)


def plot_confusion(fold, path) -> Path:
    classes = list(fold.unseen_ids)
    pos = {c: i for i, c in enumerate(classes)}
    extra = sorted({p for p in fold.predicted if p not in pos})
    cols = classes + extra
    cpos = {c: i for i, c in enumerate(cols)}
    M = np.zeros((len(classes), len(cols)))
    for t, p in zip(fold.true_labels, fold.predicted):
        M[pos[t], cpos[p]] += 1
    size = max(3.0, 0.4 * len(cols) + 1.5)
    fig, ax = new_figure(size, size)
    im = ax.imshow(M, cmap="Blues", aspect="auto")
    fig.colorbar(im, ax=ax, fraction=0.046)
    ax.set_xticks(range(len(cols)))
    ax.set_xticklabels(cols, rotation=90)
    ax.set_yticks(range(len(classes)))
    ax.set_yticklabels(classes)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title(f"fold {fold.index}: accuracy {fold.accuracy:.3f}")
    return save(fig, path)


def plot_weight_matrix(graph, path) -> Path:
    W = np.asarray(graph.weight_matrix)
    n = W.shape[0]
    size = max(3.5, 0.25 * n + 2)
    fig, ax = new_figure(size, size)
    im = ax.imshow(W, cmap="viridis", vmin=0, vmax=1)
    fig.colorbar(im, ax=ax, fraction=0.046)
    ax.axhline(graph.p - 0.5, color="w", lw=0.8)
    ax.axvline(graph.p - 0.5, color="w", lw=0.8)
    if n <= 40:
        ax.set_xticks(range(n))
        ax.set_xticklabels(graph.class_order, rotation=90)
        ax.set_yticks(range(n))
        ax.set_yticklabels(graph.class_order)
    ax.set_title(f"class graph (k1={graph.k1}, k2={graph.k2})")
    return save(fig, path)


def plot_loss_history(history, path) -> Path:
    fig, ax = new_figure()
    ax.plot(np.arange(len(history)), history, color="#4c72b0")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean hierarchical loss")
    return save(fig, path)
