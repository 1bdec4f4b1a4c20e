"""Generalization across sensor instances.

Three strategies, applied cumulatively: pool training data from many
sensors; regularize the bottleneck features with an ordering triplet
loss; and fine-tune on a new sensor using only unlabeled, order-indexed
line indentations.  The adaptation path is label-free by construction:
an AdaptationSet keeps nothing but flux sequences and their traversal
order, and an audit helper verifies that invariant.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, is_dataclass, fields as dc_fields

import numpy as np

from . import datagen, fieldsim, neural
from .metrics import EvalReport, evaluate_model, localization_accuracy, mse_metrics


class LabelLeakError(AssertionError):
    """A label-like field was reachable from the adaptation path."""


@dataclass
class MultiSensorDataset:
    """Per-sensor datasets plus the cross-validation fold layout.

    ``folds`` maps fold index to the sensor ids held out for testing;
    every other sensor is that fold's training set.  Hygiene (no overlap)
    is asserted at construction.
    """

    datasets: dict
    folds: dict = field(default_factory=dict)

    def __post_init__(self):
        known = set(self.datasets)
        for f, test_ids in self.folds.items():
            unknown = set(test_ids) - known
            if unknown:
                raise ValueError(f"fold {f}: unknown sensors {unknown}")
            if len(set(test_ids)) != len(test_ids):
                raise ValueError(f"fold {f}: duplicate held-out sensors")
            if not self.train_ids(f):
                raise ValueError(f"fold {f}: empty training split")

    @property
    def sensor_ids(self):
        return list(self.datasets.keys())

    def train_ids(self, fold):
        test = set(self.folds[fold])
        return [s for s in self.datasets if s not in test]

    def test_ids(self, fold):
        return list(self.folds[fold])

    def pooled(self, sensor_ids):
        """(X, y, locations, sensor_idx) over the listed sensors."""
        X, y, locs, sidx = [], [], [], []
        for i, sid in enumerate(sensor_ids):
            ds = self.datasets[sid]
            X.append(ds.flux)
            y.append(ds.labels(3))
            locs.append(ds.locations)
            sidx.append(np.full(len(ds), i))
        return (np.concatenate(X), np.concatenate(y),
                np.concatenate(locs), np.concatenate(sidx))


@dataclass
class Fleet:
    """Simulated sensor fleet: instances, their datasets and fold layout."""

    sensors: dict           # sensor_id -> SensorInstance
    data: MultiSensorDataset
    board_of: dict          # sensor_id -> board index


def make_fleet(n_boards=6, skins_per_board=3, seed=0, passes=6,
               variation=fieldsim.VariationParams(),
               board_standoff_sd=0.15, board_position_sd=0.15,
               baseline_mode="before_each", noise_sd=fieldsim.DEFAULT_NOISE_SD,
               drift_enabled=False) -> Fleet:
    """Boards x skins fleet with per-board geometry and per-skin variation.

    Board identity is a shared standoff offset plus magnetometer position
    jitter; skin identity an independent fabrication-variation draw.
    Fold f holds out every skin mounted on board f.
    """
    base = fieldsim.BoardGeometry()
    sensors = {}
    datasets = {}
    board_of = {}
    folds = {}
    for b in range(n_boards):
        brng = np.random.default_rng([seed, 77, b])
        standoff = max(0.2, base.sensor_standoff + brng.normal(0.0, board_standoff_sd))
        mag = np.asarray(base.magnetometer_positions, dtype=float)
        mag = mag + brng.normal(0.0, board_position_sd, mag.shape)
        geometry = fieldsim.BoardGeometry(
            magnetometer_positions=tuple(map(tuple, mag)),
            skin_thickness=base.skin_thickness,
            sensor_standoff=standoff,
            sensing_area=base.sensing_area,
        )
        fold_ids = []
        for s in range(skins_per_board):
            skin_seed = int(np.random.default_rng([seed, 99, b, s]).integers(2**31))
            sid = f"b{b}s{s}"
            sensor = fieldsim.make_sensor(
                geometry, variation, seed=skin_seed,
                drift_params=fieldsim.DriftParams(seed=skin_seed,
                                                  enabled=drift_enabled),
                noise_sd=noise_sd, sensor_id=sid)
            sensors[sid] = sensor
            datasets[sid] = datagen.snake_grid_protocol(
                sensor, passes=passes, baseline_mode=baseline_mode)
            board_of[sid] = b
            fold_ids.append(sid)
        folds[b] = fold_ids
    return Fleet(sensors=sensors,
                 data=MultiSensorDataset(datasets=datasets, folds=folds),
                 board_of=board_of)


def train_multisensor(data: MultiSensorDataset, config: neural.TrainConfig,
                      use_triplet: bool, train_ids=None,
                      model_seed=0) -> neural.MlpModel:
    """One decoder trained on pooled data from >= 2 sensors."""
    ids = train_ids if train_ids is not None else data.sensor_ids
    if len(ids) < 2:
        raise ValueError("multi-sensor training needs >= 2 sensors; "
                         "use neural.train for a single sensor")
    X, y, locs, sidx = data.pooled(ids)
    tw = (config.triplet_weight or 10.0) if use_triplet else 0.0
    cfg = neural.TrainConfig(**{**config.__dict__, "triplet_weight": tw})
    model = neural.MlpModel(seed=model_seed, relu_all=config.relu_all)
    neural.train(model, X, y, cfg, locations=locs, sensor_idx=sidx)
    return model


class _UnlabeledSequence:
    """Order-indexed flux readings with every label stripped."""

    __slots__ = ("ordered_flux", "n_points")

    def __init__(self, ordered_flux):
        self.ordered_flux = np.asarray(ordered_flux, dtype=float)
        self.n_points = len(self.ordered_flux)


@dataclass(frozen=True)
class AdaptationSet:
    """Unlabeled target-sensor data: flux sequences + traversal order only."""

    sequences: tuple
    budget: int

    @classmethod
    def from_trajectories(cls, trajectories, budget=None):
        seqs = tuple(_UnlabeledSequence(t.ordered_flux) for t in trajectories)
        n = sum(s.n_points for s in seqs)
        return cls(sequences=seqs, budget=budget if budget is not None else n)


_LABEL_FIELDS = {"location", "locations", "force", "forces", "depth",
                 "label", "labels", "start", "end", "x", "y",
                 "fx", "fy", "fz"}


def audit_no_labels(obj, _path="adaptation"):
    """Raise LabelLeakError if any label-like field is reachable."""
    if isinstance(obj, (np.ndarray, str, bytes, int, float, bool, type(None))):
        return
    if isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            audit_no_labels(v, f"{_path}[{i}]")
        return
    if isinstance(obj, dict):
        for k, v in obj.items():
            if str(k).lower() in _LABEL_FIELDS:
                raise LabelLeakError(f"{_path}[{k!r}] is a label field")
            audit_no_labels(v, f"{_path}[{k!r}]")
        return
    names = ([f.name for f in dc_fields(obj)] if is_dataclass(obj)
             else list(getattr(obj, "__slots__", []))
             or list(getattr(obj, "__dict__", {})))
    for name in names:
        if name.lower() in _LABEL_FIELDS:
            raise LabelLeakError(f"{_path}.{name} is a label field")
        audit_no_labels(getattr(obj, name), f"{_path}.{name}")


def collect_adaptation_set(sensor, budget, seed=0, points_per_line=13,
                           manual=False) -> AdaptationSet:
    """Unlabeled line indentations on the target sensor, ``budget`` points."""
    if budget <= 0:
        return AdaptationSet(sequences=(), budget=0)
    n_lines = max(1, math.ceil(budget / points_per_line))
    trajectories = datagen.line_adaptation_protocol(
        sensor, n_lines=n_lines, points_per_line=points_per_line,
        seed=seed, manual=manual)
    seqs = []
    remaining = budget
    for t in trajectories:
        take = min(remaining, t.n_points)
        if take >= 3:
            seqs.append(_UnlabeledSequence(t.ordered_flux[:take]))
        remaining -= take
        if remaining <= 0:
            break
    return AdaptationSet(sequences=tuple(seqs), budget=budget)


def self_supervised_adapt(model: neural.MlpModel, adaptation: AdaptationSet,
                          source, config: neural.TrainConfig,
                          seed=0) -> neural.MlpModel:
    """Fine-tune on a new sensor with two per-step batches.

    Each step samples a labeled source batch (minimizing the original
    loss, triplet term included) and an equal-sized batch of target
    triplets sampled with replacement (minimizing only the triplet
    loss).  The snapshot with the best source validation loss across
    epochs is returned; a zero-budget adaptation returns the input
    model unchanged.
    """
    model = model.clone()
    if adaptation.budget == 0 or not adaptation.sequences:
        return model
    audit_no_labels(adaptation)

    Xs, ys, locs, sidx = source
    rng = np.random.default_rng([seed, 5150])
    n_val = max(1, int(0.1 * len(Xs)))
    perm = rng.permutation(len(Xs))
    val_idx, tr_idx = perm[:n_val], perm[n_val:]
    Xv, yv = Xs[val_idx], ys[val_idx]
    Xs, ys = Xs[tr_idx], ys[tr_idx]
    locs, sidx = locs[tr_idx], sidx[tr_idx]

    pool = datagen.sample_triplets(
        adaptation.sequences, max(2000, 4 * adaptation.budget), seed=seed)
    batch = config.batch_size
    steps_per_epoch = max(1, math.ceil(adaptation.budget / batch))
    comp_w = config.component_weights(model.out_dim)
    src_tw = config.triplet_weight or 10.0
    target_tw = config.adapt_triplet_weight

    params = model.parameters()
    opt = neural.Adam(params, lr=config.adapt_lr)
    n_frozen = len(model.weights) - model.feat_index if config.freeze_head else 0

    best_val = np.inf
    best = [p.copy() for p in params]
    for epoch in range(config.adapt_epochs):
        for _ in range(steps_per_epoch):
            idx = rng.integers(0, len(Xs), batch)
            trip_idx = neural._labeled_triplets_in_batch(
                locs[idx], sidx[idx], rng, batch)
            triplets = None
            if len(trip_idx):
                bx = Xs[idx]
                triplets = (bx[trip_idx[:, 0]], bx[trip_idx[:, 1]],
                            bx[trip_idx[:, 2]])
            _, (gw, gb) = neural.combined_backward(
                model, Xs[idx], ys[idx], triplets=triplets,
                triplet_weight=src_tw, l2_weights=comp_w)
            tsel = rng.integers(0, len(pool), batch)
            _, (tgw, tgb) = neural.triplet_backward(
                model, pool.anchor[tsel], pool.positive[tsel],
                pool.negative[tsel])
            for g, tg in zip(gw, tgw):
                g += target_tw * tg
            for g, tg in zip(gb, tgb):
                g += target_tw * tg
            if n_frozen:
                for g in gw[-n_frozen:] + gb[-n_frozen:]:
                    g[:] = 0.0
            opt.step(params, gw + gb)
        val = neural.l2_loss(model.forward(Xv), yv, weights=comp_w)
        if val < best_val:
            best_val = val
            best = [p.copy() for p in params]
    for p, bp in zip(params, best):
        p[:] = bp
    return model


# ---------------------------------------------------------------------------
# cross-validated condition comparison

CONDITIONS = ("single", "multi", "multi_triplet", "adapted")


def _fold_condition_metrics(fleet: Fleet, config, fold, conditions,
                            budget, adapt_seed):
    """Per-test-sensor metrics for the multi-sensor conditions of one fold."""
    data = fleet.data
    train_ids = data.train_ids(fold)
    test_ids = data.test_ids(fold)
    out = {c: [] for c in conditions if c != "single"}

    model_multi = model_triplet = None
    if "multi" in conditions:
        model_multi = train_multisensor(data, config, use_triplet=False,
                                        train_ids=train_ids)
    if "multi_triplet" in conditions or "adapted" in conditions:
        model_triplet = train_multisensor(data, config, use_triplet=True,
                                          train_ids=train_ids)
    source = data.pooled(train_ids) if "adapted" in conditions else None
    for sid in test_ids:
        ds = data.datasets[sid]
        if model_multi is not None:
            out["multi"].append(evaluate_model(model_multi, ds))
        if "multi_triplet" in conditions:
            out["multi_triplet"].append(evaluate_model(model_triplet, ds))
        if "adapted" in conditions:
            aset = collect_adaptation_set(fleet.sensors[sid], budget,
                                          seed=adapt_seed)
            adapted = self_supervised_adapt(model_triplet, aset, source,
                                            config, seed=adapt_seed)
            out["adapted"].append(evaluate_model(adapted, ds))
    return out


def _single_sensor_metrics(fleet: Fleet, config, n_train=3, n_test=9):
    """Train on individual sensors, test each on sensors from other boards."""
    data = fleet.data
    ids = data.sensor_ids
    metrics = []
    train_sids = [sid for sid in ids if sid.endswith("s0")][:n_train]
    for sid in train_sids:
        ds = data.datasets[sid]
        cfg = neural.TrainConfig(**{**config.__dict__, "triplet_weight": 0.0})
        model = neural.MlpModel(seed=0, relu_all=config.relu_all)
        neural.train(model, ds.flux, ds.labels(3), cfg)
        others = [t for t in ids
                  if fleet.board_of[t] != fleet.board_of[sid]][:n_test]
        for t in others:
            metrics.append(evaluate_model(model, data.datasets[t]))
    return metrics


def cross_validate(fleet: Fleet, config: neural.TrainConfig,
                   conditions=CONDITIONS, budget=390, adapt_seed=0,
                   n_jobs=1, config_hash=""):
    """Run the condition comparison over all folds; one report per condition."""
    folds = sorted(fleet.data.folds)
    per_condition = {c: [] for c in conditions}

    if "single" in conditions:
        per_condition["single"] = _single_sensor_metrics(fleet, config)

    multi_conditions = [c for c in conditions if c != "single"]
    if multi_conditions:
        args = [(fleet, config, f, multi_conditions, budget, adapt_seed)
                for f in folds]
        if n_jobs > 1:
            with ProcessPoolExecutor(max_workers=n_jobs) as ex:
                results = list(ex.map(_fold_condition_metrics_star, args))
        else:
            results = [_fold_condition_metrics_star(a) for a in args]
        for res in results:
            for c, ms in res.items():
                per_condition[c].extend(ms)

    names = {"single": "Single-sensor",
             "multi": "Multi-sensor without triplet loss",
             "multi_triplet": "Multi-sensor with triplet loss",
             "adapted": f"Multi-sensor with triplet loss, adapted using {budget} indentations"}
    return [EvalReport.from_folds(names[c], per_condition[c],
                                  config_hash=config_hash)
            for c in conditions]


def _fold_condition_metrics_star(args):
    return _fold_condition_metrics(*args)


def budget_sweep(fleet: Fleet, config: neural.TrainConfig,
                 budgets=(0, 130, 390, 780, 1560), fold=0, adapt_seed=0,
                 config_hash=""):
    """Held-out accuracy as a function of the adaptation budget."""
    data = fleet.data
    train_ids = data.train_ids(fold)
    test_ids = data.test_ids(fold)
    model = train_multisensor(data, config, use_triplet=True,
                              train_ids=train_ids)
    source = data.pooled(train_ids)
    reports = []
    for budget in budgets:
        ms = []
        for sid in test_ids:
            aset = collect_adaptation_set(fleet.sensors[sid], budget,
                                          seed=adapt_seed)
            adapted = self_supervised_adapt(model, aset, source, config,
                                            seed=adapt_seed)
            ms.append(evaluate_model(adapted, data.datasets[sid]))
        reports.append(EvalReport.from_folds(f"budget={budget}", ms,
                                             config_hash=config_hash))
    return reports


def sensor_count_sweep(fleet: Fleet, config: neural.TrainConfig,
                       counts=(2, 5, 10, 15), fold=0, config_hash=""):
    """Held-out accuracy as a function of the training-sensor count."""
    data = fleet.data
    train_ids = data.train_ids(fold)
    test_ids = data.test_ids(fold)
    reports = []
    for k in counts:
        k = min(k, len(train_ids))
        model = train_multisensor(data, config, use_triplet=False,
                                  train_ids=train_ids[:k])
        ms = [evaluate_model(model, data.datasets[sid]) for sid in test_ids]
        reports.append(EvalReport.from_folds(f"n_sensors={k}", ms,
                                             config_hash=config_hash))
    return reports


def flex_transfer(fleet: Fleet, config: neural.TrainConfig, budget=390,
                  standoff_factor=0.2, seed=0, passes=6, adapt_seed=0,
                  config_hash=""):
    """Adapt to a board whose skin-to-board distance is 80% smaller."""
    data = fleet.data
    base = fieldsim.BoardGeometry()
    geometry = base.with_standoff(base.sensor_standoff * standoff_factor)
    target = fieldsim.make_sensor(
        geometry, fieldsim.VariationParams(), seed=int(1e6 + seed),
        drift_params=fieldsim.DriftParams(seed=seed, enabled=False),
        sensor_id="flex-target")
    target_ds = datagen.snake_grid_protocol(target, passes=passes)

    model = train_multisensor(data, config, use_triplet=True)
    source = data.pooled(data.sensor_ids)
    before = evaluate_model(model, target_ds)
    aset = collect_adaptation_set(target, budget, seed=adapt_seed)
    adapted = self_supervised_adapt(model, aset, source, config,
                                    seed=adapt_seed)
    after = evaluate_model(adapted, target_ds)
    return [EvalReport.from_folds("Flexible board, unadapted", [before],
                                  config_hash=config_hash),
            EvalReport.from_folds("Flexible board, adapted", [after],
                                  config_hash=config_hash)]
