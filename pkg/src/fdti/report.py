"""Matplotlib figures written next to the delimited reports."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import MetricsReport, SmoothnessEntry  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
}

# keeps PNG bytes identical across runs
_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata=_PNG_META, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_training_history(history, path) -> Path:
    epochs = [h.epoch for h in history]
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(7, 2.6))
        ax1.plot(epochs, [h.train_loss for h in history], color="k", lw=1)
        ax1.set_yscale("log")
        ax1.set_xlabel("epoch")
        ax1.set_ylabel("train flow loss")
        ax2.plot(epochs, [h.val_rmse for h in history], color="C0", lw=1, label="val RMSE")
        ax2.plot(epochs, [h.best_val_rmse for h in history], color="C3", lw=1, ls="--", label="best so far")
        ax2.set_xlabel("epoch")
        ax2.set_ylabel("volume RMSE")
        ax2.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def plot_horizon_metrics(reports: Mapping[str, MetricsReport], path) -> Path:
    """Grouped bars of RMSE and MAPE per horizon, one colour per model."""
    names = list(reports)
    horizons = sorted({q for r in reports.values() for q in r.entries})
    width = 0.8 / max(len(names), 1)
    x = np.arange(len(horizons))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(7.5, 2.8))
        for metric, ax in zip(("rmse", "mape"), axes):
            for k, name in enumerate(names):
                vals = [getattr(reports[name].entries[q], metric) if q in reports[name].entries else np.nan
                        for q in horizons]
                ax.bar(x + (k - (len(names) - 1) / 2) * width, vals, width, label=name)
            ax.set_xticks(x, [str(q) for q in horizons])
            ax.set_xlabel("horizon (min)")
            ax.set_ylabel("RMSE" if metric == "rmse" else "MAPE (%)")
        axes[0].legend(frameon=False, ncol=1)
        fig.tight_layout()
        return _save(fig, path)


def plot_stmad(entries: Mapping[str, Sequence[SmoothnessEntry]], path) -> Path:
    names = list(entries)
    ks = sorted({e.k for es in entries.values() for e in es})
    width = 0.8 / max(len(names), 1)
    x = np.arange(len(ks))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 2.8))
        for n, name in enumerate(names):
            by_k = {e.k: e.stmad for e in entries[name]}
            ax.bar(x + (n - (len(names) - 1) / 2) * width, [by_k.get(k, np.nan) for k in ks], width, label=name)
        ax.set_xticks(x, [f"{k}-hop" for k in ks])
        ax.set_ylabel("STMAD")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def plot_node_case(minutes, series: Mapping[str, np.ndarray], path, title: str = "") -> Path:
    """Volume of one movement over time for several sources."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 2.6))
        for name, ys in series.items():
            ax.plot(minutes, ys, lw=1.2 if name == "truth" else 1, label=name,
                    color="k" if name == "truth" else None)
        ax.set_xlabel("minute")
        ax.set_ylabel("vehicles")
        if title:
            ax.set_title(title)
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)
