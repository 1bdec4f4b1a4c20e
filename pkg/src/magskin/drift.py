"""Long-horizon drift study.

Runs one sensor through tens of thousands of indentations, forms flux
deltas under several baseline-update policies, trains a decoder on the
first few thousand interactions and tracks its error over later windows.
The elastomer softens and the magnetometer baseline random-walks over
the run, so a model trained early degrades in a policy-dependent way:
refreshing the no-load baseline before each contact cancels the walk,
while a single initial measurement lets location error grow and the
softening makes the stale model overestimate force.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import neural
from .datagen import DEPTHS, _StaticFluxCache, snake_grid_locations
from .fieldsim import ContactLaw, IndenterContact, contact_force, drift_path, DriftState
from .metrics import localization_accuracy, mse_metrics
from .protocol import BaselineTracker


@dataclass(frozen=True)
class DriftStudySpec:
    total_interactions: int = 50_000
    train_prefix: int = 5_000
    eval_window: int = 1_000
    eval_stride: int = 5_000
    baseline_modes: tuple = ("once", "every_k", "before_each")
    baseline_k: int = 100

    def __post_init__(self):
        if min(self.total_interactions, self.train_prefix,
               self.eval_window, self.eval_stride) < 1:
            raise ValueError("all interaction counts must be >= 1")
        if self.train_prefix + self.eval_window > self.total_interactions:
            raise ValueError("train_prefix + eval_window must be "
                             "<= total_interactions")

    def window_starts(self):
        """First interaction index of each evaluation window."""
        return list(range(self.eval_stride,
                          self.total_interactions - self.eval_window + 1,
                          self.eval_stride))


@dataclass
class ModeCurve:
    """Per-window error curve for one baseline-update policy."""

    mode: str
    window_starts: np.ndarray
    accuracy: np.ndarray
    mse_xy: np.ndarray
    mse_f: np.ndarray
    spearman_rho: float
    spearman_p: float
    final_force_true: np.ndarray
    final_force_pred: np.ndarray

    @property
    def mean_signed_force_error(self):
        """Mean of predicted minus true Fz at the final window, N."""
        return float(np.mean(self.final_force_pred - self.final_force_true))


@dataclass
class DriftStudyResult:
    spec: DriftStudySpec
    curves: dict = field(default_factory=dict)


def _schedule(spec, tip_radius):
    """(x, y, depth, static-delta index) arrays for the whole run, cycling
    snake-grid sweeps depth by depth."""
    locations = snake_grid_locations()
    cycle = [(loc[0], loc[1], float(d)) for d in DEPTHS for loc in locations]
    cycle = np.array(cycle)
    reps = -(-spec.total_interactions // len(cycle))
    full = np.tile(cycle, (reps, 1))[:spec.total_interactions]
    idx = np.tile(np.arange(len(cycle)), reps)[:spec.total_interactions]
    return full[:, 0], full[:, 1], full[:, 2], cycle, idx


def _mode_deltas(static_deltas, noload, offsets, start_offset, rng,
                 noise_sd, mode, k):
    """Flux deltas for one policy over the whole interaction stream."""
    n = len(static_deltas)
    tracker = BaselineTracker(mode=mode, k=k)

    def noisy(x):
        if noise_sd > 0:
            return x + rng.normal(0.0, noise_sd, 15)
        return np.array(x, dtype=float)

    deltas = np.empty((n, 15))
    tracker.observe_noload(noisy(noload + start_offset))
    for i in range(n):
        if mode != "once":
            tracker.observe_noload(noisy(noload + offsets[i]))
        deltas[i] = tracker.delta(noisy(noload + static_deltas[i] + offsets[i]))
    return deltas


def drift_study(sensor, spec: DriftStudySpec = DriftStudySpec(),
                config: neural.TrainConfig | None = None,
                tip_radius=3.0, law: ContactLaw = ContactLaw()) -> DriftStudyResult:
    """Train on the prefix, evaluate on later windows, per baseline policy.

    The underlying interaction stream (contact schedule, drift
    trajectory) is shared across policies; only the baseline handling
    and the observation noise draws differ.  Each policy trains its own
    decoder because the policies already disagree on the training-set
    deltas.
    """
    if config is None:
        config = neural.TrainConfig(epochs=40)
    xs, ys, depths, cycle, cycle_idx = _schedule(spec, tip_radius)

    cache = _StaticFluxCache(sensor)
    unique_deltas = np.array(
        [cache.contact(IndenterContact(location=(x, y), depth=d,
                                       tip_radius=tip_radius)) - cache.noload
         for x, y, d in cycle])
    static_deltas = unique_deltas[cycle_idx]

    counts, soft, offsets = drift_path(sensor.drift, spec.total_interactions,
                                       sensor.drift_params)
    unit_fz = np.array(
        [contact_force(IndenterContact(location=(0.0, 0.0), depth=float(d),
                                       tip_radius=tip_radius),
                       DriftState(), law)[2]
         for d in DEPTHS])
    fz = soft * unit_fz[np.searchsorted(DEPTHS, depths)]
    labels = np.column_stack([xs, ys, fz])

    starts = spec.window_starts()
    result = DriftStudyResult(spec=spec)
    for mode_i, mode in enumerate(spec.baseline_modes):
        rng = np.random.default_rng([sensor.seed, 7, mode_i])
        deltas = _mode_deltas(static_deltas, cache.noload, offsets,
                              sensor.drift.baseline_offset, rng,
                              sensor.noise_sd, mode, spec.baseline_k)
        model = neural.MlpModel(seed=config.seed, relu_all=config.relu_all)
        neural.train(model, deltas[:spec.train_prefix],
                     labels[:spec.train_prefix], config)

        acc = np.empty(len(starts))
        mse_xy = np.empty(len(starts))
        mse_f = np.empty(len(starts))
        final_pred = final_true = None
        for w, s in enumerate(starts):
            sl = slice(s, s + spec.eval_window)
            pred = model.forward(deltas[sl])
            acc[w] = localization_accuracy(pred, labels[sl])
            mse_xy[w], mse_f[w] = mse_metrics(pred, labels[sl])
            final_pred, final_true = pred[:, 2], labels[sl, 2]
        rho, p = stats.spearmanr(np.arange(len(starts)), mse_xy)
        result.curves[mode] = ModeCurve(
            mode=mode, window_starts=np.array(starts, dtype=int),
            accuracy=acc, mse_xy=mse_xy, mse_f=mse_f,
            spearman_rho=float(rho), spearman_p=float(p),
            final_force_true=np.array(final_true),
            final_force_pred=np.array(final_pred))
    return result


def curves_csv(result: DriftStudyResult) -> str:
    """Plot-ready per-window curves, one row per (mode, window)."""
    out = io.StringIO()
    out.write("mode,window,interaction_start,accuracy,mse_xy,mse_f,"
              "spearman_rho,spearman_p\n")
    for mode, c in result.curves.items():
        for w, s in enumerate(c.window_starts):
            out.write(f"{mode},{w},{s},{c.accuracy[w]:.6g},"
                      f"{c.mse_xy[w]:.6g},{c.mse_f[w]:.6g},"
                      f"{c.spearman_rho:.6g},{c.spearman_p:.6g}\n")
    return out.getvalue()


def force_scatter_csv(result: DriftStudyResult) -> str:
    """Final-window predicted vs true Fz per mode."""
    out = io.StringIO()
    out.write("mode,fz_true,fz_pred\n")
    for mode, c in result.curves.items():
        for t, p in zip(c.final_force_true, c.final_force_pred):
            out.write(f"{mode},{t:.6g},{p:.6g}\n")
    return out.getvalue()
