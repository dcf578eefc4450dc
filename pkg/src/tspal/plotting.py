"""Figures for strategy comparison reports.

Uses the object-oriented Figure API, so no GUI backend is ever touched.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib
from matplotlib.figure import Figure

from .simulator import StrategyReport

STYLE = {
    "random": dict(color="0.45", marker="o", linestyle="--"),
    "entropy": dict(color="tab:blue", marker="s", linestyle="-."),
    "tsp": dict(color="tab:orange", marker="^", linestyle="-"),
    "tsp_ssl": dict(color="tab:red", marker="*", linestyle="-"),
}

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    # fixed ids make SVG output byte-reproducible
    "svg.hashsalt": "tspal",
}


def plot_curves(report: StrategyReport, path, title: str = "") -> Path:
    """Mean mAP@0.5 per cycle with a one-std band, one line per strategy."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with matplotlib.rc_context(RC):
        fig = Figure(figsize=(4.8, 3.2))
        ax = fig.add_subplot()
        x = report.labeled
        for label in report.curves:
            mean, std = report.mean(label), report.std(label)
            style = STYLE.get(label.split("#")[0], {})
            ax.plot(x, mean, label=label, markersize=4, **style)
            ax.fill_between(x, mean - std, mean + std, alpha=0.15, color=style.get("color"))
        ax.set_xlabel("labeled images")
        ax.set_ylabel("mAP@0.5")
        if title:
            ax.set_title(title)
        ax.grid(True, alpha=0.3)
        ax.legend(loc="lower right", frameon=False)
        fig.tight_layout()
        metadata = {"Date": None} if path.suffix == ".svg" else None
        fig.savefig(path, metadata=metadata)
    return path
