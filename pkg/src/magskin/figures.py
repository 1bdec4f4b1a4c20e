"""Figure rendering for evaluation outputs.

Every report path that writes delimited output can also render the
matching matplotlib figure next to it.  All functions take data that is
already computed (reports or drift-study results), write one PNG and
return the path; nothing here recomputes metrics.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def condition_bars(reports, path):
    """Accuracy bar chart with SD whiskers, one bar per condition."""
    fig, ax = plt.subplots(figsize=(7, 4))
    names = [r.condition for r in reports]
    means = [r.accuracy_mean for r in reports]
    sds = [r.accuracy_sd for r in reports]
    x = np.arange(len(names))
    ax.bar(x, means, yerr=sds, capsize=4, color="tab:blue")
    ax.set_xticks(x)
    ax.set_xticklabels([n.replace(", ", ",\n") for n in names], fontsize=8)
    ax.set_ylabel("accuracy within ±1 mm, %")
    ax.set_ylim(0, 100)
    return _save(fig, path)


def sweep_curve(reports, path, xlabel="budget"):
    """Accuracy versus a swept quantity (adaptation budget, sensor count).

    The x value is parsed from each report's 'name=value' condition tag.
    """
    xs = [float(r.condition.split("=", 1)[1]) for r in reports]
    means = [r.accuracy_mean for r in reports]
    sds = [r.accuracy_sd for r in reports]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.errorbar(xs, means, yerr=sds, marker="o", capsize=4)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("accuracy within ±1 mm, %")
    ax.grid(alpha=0.3)
    return _save(fig, path)


def drift_curves(result, path):
    """MSE_xy and accuracy over interaction count, one line per policy."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4))
    for mode, c in result.curves.items():
        ax1.plot(c.window_starts, c.mse_xy, marker="o", label=mode)
        ax2.plot(c.window_starts, c.accuracy, marker="o", label=mode)
    ax1.set_xlabel("interactions")
    ax1.set_ylabel("MSE_xy, mm^2")
    ax2.set_xlabel("interactions")
    ax2.set_ylabel("accuracy within ±1 mm, %")
    ax2.set_ylim(0, 102)
    for ax in (ax1, ax2):
        ax.grid(alpha=0.3)
        ax.legend(fontsize=8)
    return _save(fig, path)


def force_scatter(result, path):
    """Final-window predicted vs true Fz; points above the diagonal mean
    the stale model overestimates the softened elastomer's force."""
    fig, ax = plt.subplots(figsize=(5, 5))
    lim = 0.0
    for mode, c in result.curves.items():
        ax.scatter(c.final_force_true, c.final_force_pred, s=6, alpha=0.4,
                   label=mode)
        lim = max(lim, c.final_force_true.max(), c.final_force_pred.max())
    lim *= 1.05
    ax.plot([0, lim], [0, lim], "k--", linewidth=1)
    ax.set_xlim(0, lim)
    ax.set_ylim(0, lim)
    ax.set_xlabel("true Fz, N")
    ax.set_ylabel("predicted Fz, N")
    ax.legend(fontsize=8)
    return _save(fig, path)


def render_all(out_dir, reports=None, drift_result=None, sweep_xlabel="budget"):
    """Write every figure the available inputs support; returns paths."""
    paths = []
    if reports:
        if all("=" in r.condition for r in reports):
            paths.append(sweep_curve(
                reports, os.path.join(out_dir, "sweep.png"), sweep_xlabel))
        else:
            paths.append(condition_bars(
                reports, os.path.join(out_dir, "conditions.png")))
    if drift_result is not None:
        paths.append(drift_curves(
            drift_result, os.path.join(out_dir, "drift_curves.png")))
        paths.append(force_scatter(
            drift_result, os.path.join(out_dir, "force_scatter.png")))
    return paths
