"""Matplotlib figure output for training reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def convergence_plot(rows, path):
    """Line chart of test PSNR and mean uncertainty (distractor vs static)
    against iteration."""
    iters = [r["iter"] for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    ax1.plot(iters, [r["test_psnr"] for r in rows], "-o", ms=3)
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("test PSNR [dB]")
    ax1.grid(alpha=0.3)
    ax2.plot(iters, [r["beta_distractor"] for r in rows], "-o", ms=3,
             label="distractor")
    ax2.plot(iters, [r["beta_static"] for r in rows], "-s", ms=3,
             label="static")
    ax2.set_xlabel("iteration")
    ax2.set_ylabel("mean uncertainty")
    ax2.legend()
    ax2.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def ablation_plot(table, metric, path):
    """Bar chart of one final metric across ablation variants."""
    names = [row["variant"] for row in table]
    vals = [row[metric] for row in table]
    fig, ax = plt.subplots(figsize=(1.2 + 0.9 * len(names), 3.0))
    ax.bar(names, vals)
    ax.set_ylabel(metric)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
