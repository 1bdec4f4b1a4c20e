"""Evaluation metrics and report rendering.

Localization accuracy is a per-axis box criterion: a prediction counts
as correct when both |x_err| and |y_err| are within the tolerance
(inclusive), 1 mm by default.  MSE_xy is the per-coordinate mean squared
location error; MSE_F the per-component mean squared force error.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field, asdict

import numpy as np


def localization_accuracy(predictions, labels, tolerance=1.0):
    """Percentage of samples with both axis errors within +/- tolerance."""
    p = np.atleast_2d(np.asarray(predictions, dtype=float))[:, :2]
    y = np.atleast_2d(np.asarray(labels, dtype=float))[:, :2]
    if len(p) == 0:
        raise ValueError("empty input")
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {y.shape}")
    hit = np.all(np.abs(p - y) <= tolerance, axis=1)
    return 100.0 * float(np.mean(hit))


def mse_metrics(predictions, labels):
    """(mse_xy in mm^2, mse_f in N^2), per-coordinate means."""
    p = np.atleast_2d(np.asarray(predictions, dtype=float))
    y = np.atleast_2d(np.asarray(labels, dtype=float))
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {y.shape}")
    err = p - y
    mse_xy = float(np.mean(err[:, :2] ** 2))
    mse_f = float(np.mean(err[:, 2:] ** 2))
    return mse_xy, mse_f


@dataclass
class EvalReport:
    """Aggregated metrics for one experimental condition."""

    condition: str
    accuracy_mean: float
    accuracy_sd: float
    mse_xy_mean: float
    mse_xy_sd: float
    mse_f_mean: float
    mse_f_sd: float
    n_samples: int
    per_fold: list = field(default_factory=list)
    config_hash: str = ""

    def __post_init__(self):
        if not 0 <= self.accuracy_mean <= 100:
            raise ValueError("accuracy out of range")
        if self.mse_xy_mean < 0 or self.mse_f_mean < 0:
            raise ValueError("MSE must be >= 0")

    @classmethod
    def from_folds(cls, condition, fold_metrics, config_hash=""):
        """fold_metrics: list of (accuracy, mse_xy, mse_f, n_samples)."""
        arr = np.array([m[:3] for m in fold_metrics], dtype=float)
        n = int(sum(m[3] for m in fold_metrics))
        sd = arr.std(axis=0) if len(arr) > 1 else np.zeros(3)
        per_fold = [{"fold": i, "accuracy": float(a), "mse_xy": float(x),
                     "mse_f": float(f), "n_samples": int(ns)}
                    for i, (a, x, f, ns) in enumerate(fold_metrics)]
        return cls(condition=condition,
                   accuracy_mean=float(arr[:, 0].mean()), accuracy_sd=float(sd[0]),
                   mse_xy_mean=float(arr[:, 1].mean()), mse_xy_sd=float(sd[1]),
                   mse_f_mean=float(arr[:, 2].mean()), mse_f_sd=float(sd[2]),
                   n_samples=n, per_fold=per_fold, config_hash=config_hash)


def evaluate_model(model, dataset, tolerance=1.0):
    """(accuracy, mse_xy, mse_f, n) of a decoder on one dataset."""
    X = dataset.flux
    y = dataset.labels(model.out_dim)
    pred = model.forward(X)
    acc = localization_accuracy(pred, y, tolerance)
    mse_xy, mse_f = mse_metrics(pred, y)
    return acc, mse_xy, mse_f, len(X)


_COLUMNS = ["condition", "accuracy_mean", "accuracy_sd", "mse_xy_mean",
            "mse_xy_sd", "mse_f_mean", "mse_f_sd", "n_samples", "config_hash"]


def render_report(reports, fmt="markdown"):
    """Render reports as 'json', 'csv' or 'markdown' (deterministic order).

    MSE_xy uses the per-coordinate mean squared error convention; this is
    stated in the rendered header so numbers are never misread.
    """
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to render")
    if fmt == "json":
        return json.dumps([asdict(r) for r in reports], indent=2, sort_keys=True) + "\n"
    if fmt == "csv":
        out = io.StringIO()
        out.write("# mse_xy is the per-coordinate mean squared location error\n")
        out.write(",".join(_COLUMNS) + "\n")
        for r in reports:
            d = asdict(r)
            out.write(",".join(str(d[c]) for c in _COLUMNS) + "\n")
        return out.getvalue()
    if fmt == "markdown":
        lines = [
            "| Model | Accuracy, in % | MSE_xy, in mm^2 | MSE_F, in N^2 |",
            "|---|---|---|---|",
        ]
        for r in reports:
            lines.append(
                f"| {r.condition} | {r.accuracy_mean:.2f} ± {r.accuracy_sd:.2f}"
                f" | {r.mse_xy_mean:.3f} ± {r.mse_xy_sd:.3f}"
                f" | {r.mse_f_mean:.3f} ± {r.mse_f_sd:.3f} |")
        lines.append("")
        lines.append("MSE_xy convention: per-coordinate mean squared error.")
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown format {fmt!r}")


def reports_from_json(text):
    return [EvalReport(**d) for d in json.loads(text)]
