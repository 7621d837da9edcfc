"""Report figures written next to the delimited outputs."""
from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# no timestamps or version strings, so reruns are byte-identical
PNG_META = {"Software": None}

STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.dpi": 120,
}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", metadata=PNG_META)
    plt.close(fig)


def plot_cycle_qa(qa, path):
    """Median cycle IoU per cycle, failed cycles in red, with the Q line."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 3))
        ts = [c.t for c in qa.cycles]
        vals = [0.0 if math.isnan(c.median_iou) else c.median_iou for c in qa.cycles]
        colors = ["#bbbbbb" if c.indeterminate else ("#c0392b" if c.fc else "#2e86c1")
                  for c in qa.cycles]
        ax.bar(ts, vals, color=colors, width=0.7)
        ax.axhline(qa.q, color="k", ls="--", lw=1, label=f"Q = {qa.q:g}")
        ax.set_ylim(0, 1.05)
        ax.set_xlabel("cycle start section t")
        ax.set_ylabel("median cycle IoU")
        ax.set_title(f"series quality: {qa.quality.quality.value}")
        ax.legend(loc="lower right", frameon=False)
        fig.tight_layout()
        _save(fig, path)


def plot_track_lengths(trackset, path, n_sections=None):
    lengths = sorted(trackset.lengths().values())
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        top = n_sections or (max(lengths) if lengths else 1)
        bins = [b - 0.5 for b in range(1, top + 2)]
        ax.hist(lengths, bins=bins, color="#2e86c1", edgecolor="white")
        ax.set_xlabel("track length (sections)")
        ax.set_ylabel("tracks")
        ax.set_title(f"{len(lengths)} tracks")
        fig.tight_layout()
        _save(fig, path)


def plot_threshold_sweep(rows, path):
    """``rows``: sequence of (s, MotScore)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        s = [r[0] for r in rows]
        ax.plot(s, [r[1].idf1 for r in rows], "o-", label="IDF1")
        ax.plot(s, [r[1].mota for r in rows], "s--", label="MOTA")
        ax.set_xlabel("association IoU threshold S")
        ax.set_ylabel("score")
        ax.legend(frameon=False)
        fig.tight_layout()
        _save(fig, path)
