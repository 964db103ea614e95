"""Figures written next to the CLI's JSONL/CSV reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _finish(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_assignment(assignment, path, title=None):
    """Sorted probabilities and their cumulative mass."""
    p = np.sort(assignment.probs)[::-1]
    rank = np.arange(1, p.size + 1)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.semilogy(rank, p, lw=1.2)
    ax1.set_xlabel("rank")
    ax1.set_ylabel("probability")
    ax2.plot(rank, np.cumsum(p), lw=1.2)
    ax2.set_xlabel("rank")
    ax2.set_ylabel("cumulative mass")
    ax2.set_ylim(0, 1.02)
    if title:
        fig.suptitle(title)
    _finish(fig, path)


def plot_dup_reports(reports, path):
    """Inflation ratio per regularizer, with the no-inflation line at 1."""
    names = [r.regularizer for r in reports]
    ratios = [r.inflation_ratio for r in reports]
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    ax.bar(names, ratios, color=["#4c72b0", "#dd8452", "#55a868"][:len(names)])
    ax.axhline(1.0, color="k", lw=0.8, ls="--")
    ax.set_ylabel("mass inflation on duplicated content")
    if reports:
        ax.set_title(f"fraction={reports[0].fraction:g}, factor={reports[0].factor}")
    _finish(fig, path)


def plot_oracle(reports, path):
    """Closed-form objective against the subgradient oracle, one dot per instance."""
    cf = np.array([r.closed_form_objective for r in reports])
    orc = np.array([r.oracle_objective for r in reports])
    bad = np.array([bool(r.extra.get("assumption_violated")) for r in reports])
    fig, ax = plt.subplots(figsize=(4.5, 4))
    ax.scatter(orc[~bad], cf[~bad], s=12, label="assumptions hold")
    if bad.any():
        ax.scatter(orc[bad], cf[bad], s=12, marker="x", label="assumptions violated")
    lo = float(min(cf.min(), orc.min())) if cf.size else 0.0
    hi = float(max(cf.max(), orc.max())) if cf.size else 1.0
    ax.plot([lo, hi], [lo, hi], "k--", lw=0.8)
    ax.set_xlabel("oracle objective")
    ax.set_ylabel("closed-form objective")
    ax.legend(fontsize=8)
    _finish(fig, path)
