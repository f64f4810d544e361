"""Matplotlib figures written next to the CSV reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_STYLE = {
    "figure.figsize": (5.0, 3.4),
    "figure.dpi": 120,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
}


def plot_training_curve(history, path) -> None:
    """Loss (log scale) and PSNR over iterations."""
    iters = [r.iter for r in history]
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        ax.semilogy(iters, [r.loss for r in history], color="tab:blue", label="loss")
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        twin = ax.twinx()
        twin.plot(iters, [r.psnr for r in history], color="tab:orange", label="PSNR")
        twin.set_ylabel("PSNR [dB]")
        twin.grid(False)
        fig.legend(loc="upper center", ncol=2, frameon=False)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def plot_sweep(runs, summary, path, x: str, metric: str, fixed: dict) -> bool:
    """Plot ``metric`` against ``x`` for the summary cells matching ``fixed``.

    Individual seeds are drawn as dots, medians as a line.  Returns False
    (and writes nothing) when fewer than two cells match.
    """
    cells = sorted((c for c in summary if all(c[k] == v for k, v in fixed.items())),
                   key=lambda c: c[x])
    if len(cells) < 2:
        return False
    xs = [c[x] for c in cells]
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        pts = [(r[x], r[metric]) for r in runs if all(r[k] == v for k, v in fixed.items())]
        if pts:
            ax.scatter(*zip(*pts), s=10, color="0.6", zorder=2, label="runs")
        ax.plot(xs, [c[f"median_{metric}"] for c in cells], "o-", color="tab:blue", zorder=3,
                label="median")
        ax.set_xscale("log", base=2)
        ax.set_xlabel({"sigma": "grid extent sigma", "n": "texture resolution N"}[x])
        ax.set_xticks(xs)
        ax.set_xticklabels([f"{v:g}" for v in xs])
        ax.set_ylabel(metric.upper())
        ax.set_title(", ".join(f"{k}={v:g}" for k, v in fixed.items()))
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return True
