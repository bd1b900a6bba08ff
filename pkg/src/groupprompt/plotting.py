"""Static figures written next to the CLI's machine-readable output."""
from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# keep PNG bytes independent of the matplotlib build
_META = {"Software": None}


def plot_loss(records: Sequence[dict], path) -> None:
    """Per-epoch training loss, log scale."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    steps = [r["step"] for r in records]
    ax.plot(steps, [r["loss"] for r in records], marker="o", ms=2.5, lw=1.2)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("mean epoch loss")
    if records:
        ax.set_title(records[0].get("phase", ""))
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)


def plot_ablation(rows: Sequence[dict], path) -> None:
    """F_d and mean F_c against the number of groups."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    g = [r["groups"] for r in rows]
    ax.plot(g, [r["f_d"] for r in rows], marker="o", label="F_d")
    ax.plot(g, [r["mean_f_c"] for r in rows], marker="s", label="mean F_c")
    if len(g) > 1 and min(g) > 0:
        ax.set_xscale("log", base=2)
    ax.set_xticks(g)
    ax.set_xticklabels([str(v) for v in g])
    ax.set_xlabel("groups G")
    ax.set_ylabel("F-score")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)


def plot_group_histogram(counts: Sequence[int], path) -> None:
    """Number of queries assigned to each group."""
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.bar(range(len(counts)), counts, width=0.85)
    ax.set_xlabel("group")
    ax.set_ylabel("queries")
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)
