"""Figures written next to CSV reports."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .ablation import METRICS, MetricReport  # noqa: E402


def plot_ablation(reports: list[MetricReport], out_dir: str | Path) -> Path:
    out = Path(out_dir) / "ablation.png"
    names = [r.config for r in reports]
    fig, axes = plt.subplots(2, 4, figsize=(16, 7))
    for ax, metric in zip(axes.flat, METRICS):
        vals = [r.means[metric] for r in reports]
        ax.bar(range(len(vals)), [0 if math.isnan(v) else v for v in vals], color="tab:blue")
        ax.set_xticks(range(len(vals)))
        ax.set_xticklabels(names, rotation=60, ha="right", fontsize=7)
        ax.set_title(metric, fontsize=9)
    axes.flat[-1].axis("off")
    fig.tight_layout()
    fig.savefig(out, dpi=100)
    plt.close(fig)
    return out


def plot_training(history: list[dict], path: str | Path) -> Path:
    path = Path(path)
    steps = [h["step"] for h in history]
    fig, ax = plt.subplots(1, 2, figsize=(10, 3.5))
    ax[0].plot(steps, [h["ce"] for h in history])
    ax[0].set_title("cross-entropy")
    ax[1].plot(steps, [h["reg"] for h in history])
    ax[1].set_title("regression")
    for a in ax:
        a.set_xlabel("step")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_stream(report: list[dict], path: str | Path) -> Path:
    path = Path(path)
    t = [r["t"] for r in report]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(t, [r["wall_ms"] for r in report], label="compute")
    ax.plot(t, [r["chunk_ms"] for r in report], "r--", label="audio")
    ax.set_xlabel("chunk")
    ax.set_ylabel("ms")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
