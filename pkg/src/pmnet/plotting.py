"""Figures for loss curves, threshold sweeps and ablation studies."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 10,
    "axes.labelsize": 10,
    "axes.titlesize": 11,
    "legend.fontsize": 8,
    "xtick.labelsize": 9,
    "ytick.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.5,
    "lines.markersize": 5,
    "figure.figsize": (5.0, 3.4),
    "savefig.bbox": "tight",
    # fixed hash salt keeps SVG output byte-stable across runs
    "svg.hashsalt": "pmnet",
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, metadata={"Date": None} if path.suffix == ".svg" else None)
    plt.close(fig)
    return path


def plot_loss_curves(records, path, title: str = "training loss") -> Path:
    """One line per phase for train loss, dashed for validation loss."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        phases = list(dict.fromkeys(r.phase for r in records))
        for i, phase in enumerate(phases):
            rs = [r for r in records if r.phase == phase]
            color = f"C{i}"
            ax.plot([r.epoch for r in rs], [r.train_loss for r in rs], color=color, label=f"{phase} train")
            ax.plot([r.epoch for r in rs], [r.val_loss for r in rs], color=color, ls="--", label=f"{phase} val")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
        ax.set_title(title)
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_threshold_curve(thresholds: Sequence[float], f1: Sequence[float], f2: Sequence[float], path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(thresholds, f1, marker="o", label="mean F1")
        ax.plot(thresholds, f2, marker="s", label="mean F2")
        ax.set_xlabel("decision threshold")
        ax.set_ylabel("score")
        ax.set_ylim(0, 1)
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_sweep_lines(series: dict[str, tuple[list, list, list]], xlabel: str, path, title: str = "") -> Path:
    """``series[name] = (x, mean, std)``; drawn as error-bar lines."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for i, (name, (x, mean, std)) in enumerate(series.items()):
            ax.errorbar(x, mean, yerr=std, marker="o", capsize=3, color=f"C{i}", label=name)
        ax.set_xlabel(xlabel)
        ax.set_ylabel("mean F1")
        if title:
            ax.set_title(title)
        if len(series) > 1:
            ax.legend(frameon=False)
        return _save(fig, path)


def plot_sweep_bars(labels: Sequence[str], mean: Sequence[float], std: Sequence[float], path, title: str = "") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.bar(range(len(labels)), mean, yerr=std, capsize=4, color=[f"C{i}" for i in range(len(labels))])
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels)
        ax.set_ylabel("mean F1")
        ax.set_ylim(0, 1)
        if title:
            ax.set_title(title)
        return _save(fig, path)
