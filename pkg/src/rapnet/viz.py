"""Matplotlib renderings written next to the delimited report files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def render_attention_heatmap(tokens, feature_names, matrix: np.ndarray, path):
    """Darker cell = higher (row-normalized) attention feature value."""
    fig, ax = plt.subplots(figsize=(max(4.0, 0.45 * len(tokens)), 4.5))
    ax.imshow(matrix, cmap="Greys", aspect="auto", vmin=0.0, vmax=1.0)
    ax.set_xticks(range(len(tokens)))
    ax.set_xticklabels(tokens, rotation=60, ha="right", fontsize=7)
    ax.set_yticks(range(len(feature_names)))
    ax.set_yticklabels(feature_names, fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_history(history: list, path):
    """Training loss and dev metrics per epoch."""
    epochs = [rec["epoch"] for rec in history]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(epochs, [rec["train_loss"] for rec in history], marker="o")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("train loss")
    ax2.plot(epochs, [rec["dev_mrr"] for rec in history], marker="o", label="dev MRR")
    ax2.plot(epochs, [rec["dev_avg"] for rec in history], marker="s", label="dev avg")
    ax2.set_xlabel("epoch")
    ax2.set_ylim(0, 1)
    ax2.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_ablation(rows, path):
    """Grouped bars of R@10 / MRR / average per ablation variant."""
    names = [name for name, _, _ in rows]
    r10 = [report.recall_at[10] for _, report, _ in rows]
    mrrs = [report.mrr for _, report, _ in rows]
    avgs = [report.average for _, report, _ in rows]
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.bar(x - 0.25, r10, width=0.25, label="R@10")
    ax.bar(x, mrrs, width=0.25, label="MRR")
    ax.bar(x + 0.25, avgs, width=0.25, label="average")
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=20, ha="right", fontsize=8)
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
