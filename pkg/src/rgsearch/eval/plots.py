"""SVG figures for experiment results."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from ..core import atomic_write  # noqa: E402

MARKERS = {"rr": "o", "slidegar": "s", "rgs": "^", "random": "x"}
LABELS = {"rr": "RR", "slidegar": "SlideGAR", "rgs": "RGS", "random": "Random"}
# returned / seen but not selected / never seen
BREAKDOWN_COLORS = ("#e67e22", "#f5cba7", "#b3b3b3")

STYLE = {
    "font.size": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "svg.hashsalt": "rgsearch",
    "svg.fonttype": "none",
}


def _save(fig, path: Path) -> Path:
    with atomic_write(path, "wb") as fh:
        fig.savefig(fh, format="svg", metadata={"Date": None}, bbox_inches="tight")
    plt.close(fig)
    return path


def _curve(result, x_attr: str, xlabel: str, path: Path, log_x: bool = False) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for m in result.config.methods:
            pts = [
                (getattr(a, x_attr), a.ndcg10)
                for a in result.aggregates
                if a.method == m and not math.isnan(a.ndcg10)
            ]
            if not pts:
                continue
            pts.sort()
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker=MARKERS.get(m, "."), label=LABELS.get(m, m))
        if log_x:
            ax.set_xscale("log")
        ax.set_xlabel(xlabel)
        ax.set_ylabel("mean NDCG@10")
        ax.set_ylim(bottom=0)
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_ndcg_vs_budget(result, path: Path) -> Path:
    return _curve(result, "budget", "reranker budget k", path)


def plot_ndcg_vs_tokens(result, path: Path) -> Path:
    return _curve(result, "tokens_in", "mean input tokens per query", path, log_x=True)


def plot_ndcg_vs_calls(result, path: Path) -> Path:
    return _curve(result, "calls", "mean reranker calls per query", path)


def plot_error_breakdown(result, path: Path) -> Path:
    """Stacked bars of where the positives ended up, per method and budget."""
    bars = []
    for m in result.config.methods:
        for b, eb in sorted(result.breakdowns.get(m, {}).items()):
            bars.append((f"{LABELS.get(m, m)}\n@{b}", eb))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4, 0.7 * len(bars) + 1.5), 3.5))
        xs = range(len(bars))
        bottom = [0.0] * len(bars)
        parts = (
            ("returned", "fraction_returned"),
            ("seen, not selected", "fraction_seen_not_selected"),
            ("never seen", "fraction_never_seen"),
        )
        for (label, attr), color in zip(parts, BREAKDOWN_COLORS):
            vals = [getattr(eb, attr) for _, eb in bars]
            ax.bar(xs, vals, bottom=bottom, color=color, label=label, width=0.7)
            bottom = [u + v for u, v in zip(bottom, vals)]
        ax.set_xticks(list(xs))
        ax.set_xticklabels([name for name, _ in bars], fontsize=8)
        ax.set_ylabel("fraction of relevant documents")
        ax.set_ylim(0, 1)
        ax.grid(axis="x", visible=False)
        ax.legend(frameon=False, fontsize=8, loc="upper left", bbox_to_anchor=(1.0, 1.0))
        return _save(fig, path)


def render_all(result, out_dir: Path) -> list[Path]:
    out = Path(out_dir)
    return [
        plot_ndcg_vs_budget(result, out / "ndcg_vs_budget.svg"),
        plot_ndcg_vs_tokens(result, out / "ndcg_vs_tokens.svg"),
        plot_ndcg_vs_calls(result, out / "ndcg_vs_calls.svg"),
        plot_error_breakdown(result, out / "error_breakdown.svg"),
    ]
