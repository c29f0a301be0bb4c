"""Report figures.  Everything renders off-screen to PNG files."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# keep PNG bytes stable between runs
_PNG_META = {"Software": None}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_history(history: Sequence, path: str | Path, best_epoch: int | None = None) -> Path:
    """Mean triplet loss (left axis) and validation accuracy (right axis) per epoch."""
    epochs = [r.epoch for r in history]
    fig, ax = plt.subplots(figsize=(6, 3.6))
    ax.plot(epochs, [r.loss for r in history], "o-", color="tab:blue", ms=3, label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean triplet loss", color="tab:blue")
    ax2 = ax.twinx()
    ax2.plot(epochs, [r.val_accuracy for r in history], "s--", color="tab:orange", ms=3, label="val accuracy")
    ax2.set_ylabel("validation accuracy", color="tab:orange")
    ax2.set_ylim(0, 1.02)
    if best_epoch:
        ax.axvline(best_epoch, color="grey", lw=0.8, ls=":")
    ax.set_title("Training history")
    return _save(fig, path)


def plot_eval(result, path: str | Path) -> Path:
    """Where the gold concept landed in each mention's ranking."""
    labels = ["1", "2", "3", "4-5", ">5", "not in set"]
    counts = np.zeros(len(labels), dtype=int)
    for row in result.rows:
        ids = [cid for cid, _ in row.ranked]
        hit = next((i for i, cid in enumerate(ids) if cid in row.gold_resolved), None)
        if hit is None:
            counts[-1] += 1
        elif hit < 3:
            counts[hit] += 1
        elif hit < 5:
            counts[3] += 1
        else:
            counts[4] += 1
    fig, ax = plt.subplots(figsize=(6, 3.6))
    ax.bar(labels, counts, color=["tab:green"] + ["tab:grey"] * 4 + ["tab:red"])
    ax.set_xlabel("rank of gold concept")
    ax.set_ylabel("mentions")
    ax.set_title(f"Accuracy@1 = {result.accuracy:.4f} ({result.tp}/{result.total})")
    return _save(fig, path)


def plot_candidates(sizes: Sequence[int], recalled: Sequence[bool], path: str | Path, title: str = "") -> Path:
    """Histogram of candidate-set sizes, split by whether gold was retrieved."""
    sizes = np.asarray(sizes, dtype=int)
    recalled = np.asarray(recalled, dtype=bool)
    top = int(sizes.max()) if sizes.size else 0
    bins = np.arange(-0.5, top + 1.5)
    fig, ax = plt.subplots(figsize=(6, 3.6))
    ax.hist([sizes[recalled], sizes[~recalled]], bins=bins, stacked=True, color=["tab:green", "tab:red"], label=["gold retrieved", "gold missed"])
    ax.set_xlabel("candidates per mention")
    ax.set_ylabel("mentions")
    rate = recalled.mean() if recalled.size else 0.0
    ax.set_title(f"{title} recall = {rate:.4f}".strip())
    ax.legend()
    return _save(fig, path)
