"""Report figures rendered next to the delimited outputs.

Rendering is headless (Agg) and file-based; callers pass target paths.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def render_history(rows, path) -> None:
    """Training curve: micro-pAp@k per round plus the objective."""
    iterations = [r.iteration for r in rows]
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    ax.plot(iterations, [r.train_micro_papk for r in rows], marker="o", label="train micro-pAp@k")
    ax.plot(iterations, [r.val_micro_papk for r in rows], marker="s", label="val micro-pAp@k")
    ax.set_xlabel("outer iteration")
    ax.set_ylabel("micro-pAp@k")
    ax.set_ylim(0.0, 1.05)
    ax2 = ax.twinx()
    ax2.plot(iterations, [r.loss for r in rows], color="gray", linestyle="--", label="objective")
    ax2.set_ylabel("objective", color="gray")
    ax.legend(loc="lower right")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_metric_curves(reports_by_k: dict, path) -> None:
    """One line per metric across the evaluated k values."""
    ks = sorted(reports_by_k)
    metric_names = sorted({name for k in ks for name in reports_by_k[k]})
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for name in metric_names:
        ys = [reports_by_k[k][name].value for k in ks]
        ax.plot(ks, ys, marker="o", label=name)
    ax.set_xlabel("k")
    ax.set_ylabel("metric value")
    ax.set_ylim(0.0, 1.05)
    ax.set_xticks(ks)
    ax.legend(loc="best", fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
