"""Report figures written next to the delimited outputs.

PNG metadata is stripped so reruns on the same inputs give identical bytes.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (6.4, 4.0),
    "figure.dpi": 100,
    "savefig.dpi": 100,
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "svg.hashsalt": "medcurate",
}


def _save(fig, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return path


def metric_histograms(rows: Sequence[Mapping], metrics: Sequence[str], path: str | os.PathLike, title: str = "") -> Path:
    """One histogram panel per metric over per-sample scores (0-100 scale)."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(metrics), figsize=(3.2 * len(metrics), 3.0), squeeze=False)
        for ax, m in zip(axes[0], metrics):
            values = [r[m] for r in rows if m in r]
            ax.hist(values, bins=20, color="#4C72B0", edgecolor="white")
            ax.set_xlabel(f"{m} (x100)")
            ax.set_ylabel("samples")
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        return _save(fig, path)


def extent_histogram(extents: Sequence[float], max_extent: float, path: str | os.PathLike) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.hist(extents, bins=30, color="#55A868", edgecolor="white")
        ax.axvline(max_extent, color="#C44E52", linestyle="--", label=f"max extent {max_extent:g}")
        ax.set_xlabel("positional extent")
        ax.set_ylabel("samples")
        ax.legend()
        fig.tight_layout()
        return _save(fig, path)


def composition_bars(before: Mapping[str, int], after: Mapping[str, int], path: str | os.PathLike) -> Path:
    """Grouped bars of sample counts per category before and after a transform."""
    keys = sorted(set(before) | set(after))
    xs = range(len(keys))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.bar([x - 0.2 for x in xs], [before.get(k, 0) for k in keys], width=0.4, label="drawn", color="#8172B2")
        ax.bar([x + 0.2 for x in xs], [after.get(k, 0) for k in keys], width=0.4, label="final", color="#CCB974")
        ax.set_xticks(list(xs))
        ax.set_xticklabels(keys, rotation=30, ha="right")
        ax.set_ylabel("samples")
        ax.legend()
        fig.tight_layout()
        return _save(fig, path)
