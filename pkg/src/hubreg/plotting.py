"""Figures for the report path (written to files, never shown)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .robust import MixtureParams, maxwell_pdf  # noqa: E402


def plot_convergence(trace, path) -> None:
    """Square root of the energy per iteration, levels shaded alternately."""
    it = np.array([r["iter"] for r in trace])
    e = np.array([r["sqrt_energy"] for r in trace])
    lev = np.array([r["level"] for r in trace])
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(it, e, lw=1.2, color="k")
    for k, level in enumerate(np.unique(lev)):
        sel = it[lev == level]
        if k % 2:
            ax.axvspan(sel.min(), sel.max(), color="0.9", lw=0)
    ax.set_xlabel("iteration")
    ax.set_ylabel("sqrt(energy)")
    ax.set_yscale("log")
    ax.set_title("convergence")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_distance_mixture(distances, theta: MixtureParams, path, bins=80) -> None:
    """Histogram of one image's match distances with the fitted mixture."""
    d = np.asarray(distances, dtype=float)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(d, bins=bins, density=True, color="0.75")
    x = np.linspace(max(d.min(), 1e-6), d.max(), 400)
    f1 = theta.r * maxwell_pdf(x, theta.s1)
    f2 = (1 - theta.r) * maxwell_pdf(x, theta.s2)
    ax.plot(x, f1, label=f"inliers s={theta.s1:.2f}")
    ax.plot(x, f2, label=f"outliers s={theta.s2:.2f}")
    ax.plot(x, f1 + f2, "k--", lw=1, label=f"mixture r={theta.r:.2f}")
    ax.set_xlabel("distance (mm)")
    ax.set_ylabel("density")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_landmarks(report, path) -> None:
    """Per-category mean and max landmark spread."""
    names = [c.name for c in report.categories]
    means = [c.mean_mm for c in report.categories]
    maxes = [c.max_mm for c in report.categories]
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(max(6, 0.35 * len(names)), 4))
    ax.bar(x - 0.2, means, 0.4, label="mean")
    ax.bar(x + 0.2, maxes, 0.4, label="max")
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=90, fontsize=7)
    ax.set_ylabel("distance to category mean (mm)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
