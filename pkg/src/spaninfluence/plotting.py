"""PNG figures for K-sweeps and faithfulness tables."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path
from typing import Iterable

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import FaithfulnessTable, MetricReport  # noqa: E402


def plot_k_sweep(reports: Iterable[MetricReport], path, title: str = "") -> Path:
    """Sag and Lag against K, one line per method."""
    curves: dict[str, dict[str, list[tuple[float, float]]]] = {"sag": defaultdict(list), "lag": defaultdict(list)}
    for r in reports:
        if r.metric in curves and r.K is not None and r.valid:
            curves[r.metric][r.method].append((r.K, r.display_value()))
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for ax, metric in zip(axes, ("sag", "lag")):
        for method, pts in sorted(curves[metric].items()):
            pts.sort()
            ax.plot([k for k, _ in pts], [v for _, v in pts], marker="o", label=method)
        ax.set_xscale("log")
        ax.set_xlabel("K")
        ax.set_ylabel(f"{metric.capitalize()} (%)")
        ax.grid(alpha=0.3)
    axes[0].legend(fontsize=8)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_faithfulness(table: FaithfulnessTable, path, title: str = "") -> Path:
    """Per-run Spearman points and their mean for each method."""
    fig, ax = plt.subplots(figsize=(6, 4))
    names = list(table.rows)
    for i, name in enumerate(names):
        row = table.rows[name]
        ax.scatter([i] * len(row.per_run), row.per_run, alpha=0.6)
        ax.hlines(row.mean, i - 0.25, i + 0.25, colors="k")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names)
    ax.set_ylabel("Spearman vs ground truth (x100)")
    ax.grid(alpha=0.3, axis="y")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
