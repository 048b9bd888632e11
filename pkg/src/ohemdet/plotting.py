"""Optional figures next to the CSV outputs.

matplotlib is imported lazily with the Agg backend; when it is missing every
function returns None and the CSVs remain the only output.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


def _pyplot():
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.info("matplotlib not installed; skipping figures")
        return None
    return plt


def _smooth(y: np.ndarray, window: int) -> np.ndarray:
    if window <= 1 or len(y) < window:
        return y
    kernel = np.ones(window) / window
    return np.convolve(y, kernel, mode="valid")


def plot_training_loss(records, path, window: int = 50) -> Path | None:
    """Moving average of the mean selected-RoI loss per iteration."""
    plt = _pyplot()
    if plt is None:
        return None
    it = np.array([r.iter for r in records])
    loss = np.array([r.mean_selected_loss for r in records], dtype=np.float64)
    ok = np.isfinite(loss)
    it, loss = it[ok], loss[ok]
    sm = _smooth(loss, window)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(it[len(it) - len(sm):], sm)
    ax.set_xlabel("iteration")
    ax.set_ylabel(f"mean selected loss ({window}-iter average)")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def plot_loss_curves(rows, path) -> Path | None:
    """All-RoI training loss against iteration, one line per variant (mean over seeds)."""
    plt = _pyplot()
    if plt is None:
        return None
    by_variant: dict[str, list] = defaultdict(list)
    for r in rows:
        if r.curve:
            by_variant[r.variant].append(r.curve)
    if not by_variant:
        return None
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, curves in by_variant.items():
        n = min(len(c) for c in curves)
        its = [c[0] for c in curves[0][:n]]
        mean = np.mean([[v for _, v in c[:n]] for c in curves], axis=0)
        ax.plot(its, mean, marker="o", label=name)
    ax.set_xlabel("iteration")
    ax.set_ylabel("mean loss over all RoIs")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def plot_ablation_map(rows, path) -> Path | None:
    """Per-seed mAP for each variant, with the median marked."""
    plt = _pyplot()
    if plt is None:
        return None
    names = list(dict.fromkeys(r.variant for r in rows))
    fig, ax = plt.subplots(figsize=(7, 4))
    for i, name in enumerate(names):
        vals = [r.final_map for r in rows if r.variant == name]
        ax.scatter([i] * len(vals), vals, color="C0", alpha=0.6)
        ax.hlines(np.median(vals), i - 0.3, i + 0.3, color="C3")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("test mAP")
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)
