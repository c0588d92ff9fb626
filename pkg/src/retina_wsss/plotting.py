"""Figures written next to the JSON/CSV reports."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def sweep_curve(result, path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 2.8))
        ax.plot(result.lambdas, result.miou, color="k", lw=1.2)
        ax.axvline(result.best_lambda, color="tab:red", ls="--", lw=0.8)
        ax.set_xlabel("background threshold")
        ax.set_ylabel("mIoU")
        ax.set_xlim(0, 1)
        ax.set_title(f"best {result.best_miou:.3f} at {result.best_lambda:.2f}", fontsize=9)
        return _save(fig, path)


def loss_curves(history, path) -> Path:
    steps = [r["step"] for r in history]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 2.8))
        for key in ("L1", "L2", "L3", "L4"):
            ax.plot(steps, [r[key] for r in history], lw=0.8, label=key)
        ax.plot(steps, [r["total"] for r in history], color="k", lw=1.4, label="total")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend(ncol=5, loc="upper right")
        return _save(fig, path)


def similarity_by_window(series: dict, path) -> Path:
    """``series`` maps a name to ``{window size: mean similarity}``."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 2.8))
        for name, curve in series.items():
            ws = sorted(curve)
            ax.plot(ws, [curve[w] for w in ws], marker="o", ms=2.5, lw=1, label=name)
        ax.set_xlabel("window size")
        ax.set_ylabel("cosine similarity")
        if len(series) > 1:
            ax.legend()
        return _save(fig, path)


def word_histograms(freqs: dict, path, top: int = 15) -> Path:
    groups = list(freqs)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, max(1, len(groups)), figsize=(3.2 * max(1, len(groups)), 3), squeeze=False)
        for ax, group in zip(axes[0], groups):
            words = freqs[group][:top]
            ax.barh([w for w, _ in words][::-1], [c for _, c in words][::-1], color="0.35")
            ax.set_title(group, fontsize=9)
            ax.set_xlabel("count")
        return _save(fig, path)
