"""Indentation protocols driving the simulator to produce datasets.

Labeled data comes from a boustrophedon ("snake") grid of quasi-static
indentations at six depths, or from straight-line shear drags.  Unlabeled
adaptation data comes from straight-line pokes whose points are only
order-indexed, never located; triplets sampled from those lines carry the
ordering supervision used for self-supervised adaptation.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .fieldsim import (
    ContactLaw,
    DriftState,
    IndenterContact,
    SensorInstance,
    advance_sensor,
    contact_force,
    drift_path,
    read_flux,
    static_flux,
)
from .protocol import BASELINE_MODES, BaselineTracker

GRID_SPAN = 16.0        # mm, 9x9 grid at 2 mm pitch
GRID_N = 9
DEPTHS = tuple(np.round(np.linspace(0.2, 1.2, 6), 10))  # mm

_RECORD_DTYPE = np.dtype([
    ("sensor_idx", "<i8"),
    ("pass_index", "<i8"),
    ("interaction_index", "<i8"),
    ("x", "<f8"),
    ("y", "<f8"),
    ("depth", "<f8"),
    ("fx", "<f8"),
    ("fy", "<f8"),
    ("fz", "<f8"),
    ("flux", "<f8", (15,)),
])


@dataclass(frozen=True)
class Indentation:
    """One labeled sample."""

    location: tuple
    depth: float
    force: np.ndarray
    flux_delta: np.ndarray
    sensor_id: str
    pass_index: int
    interaction_index: int


@dataclass
class Dataset:
    """Column store of indentations plus regeneration metadata."""

    records: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    @property
    def flux(self):
        return self.records["flux"]

    @property
    def locations(self):
        return np.column_stack([self.records["x"], self.records["y"]])

    @property
    def forces(self):
        return np.column_stack([self.records["fx"], self.records["fy"],
                                self.records["fz"]])

    @property
    def sensor_ids(self):
        return self.metadata.get("sensor_ids", [])

    def labels(self, out_dim=3):
        """Targets for the decoder: (x, y, Fz) or (x, y, Fx, Fy, Fz)."""
        r = self.records
        if out_dim == 3:
            return np.column_stack([r["x"], r["y"], r["fz"]])
        if out_dim == 5:
            return np.column_stack([r["x"], r["y"], r["fx"], r["fy"], r["fz"]])
        raise ValueError("out_dim must be 3 or 5")

    def samples(self):
        ids = self.sensor_ids
        for r in self.records:
            yield Indentation(
                location=(float(r["x"]), float(r["y"])),
                depth=float(r["depth"]),
                force=np.array([r["fx"], r["fy"], r["fz"]]),
                flux_delta=np.array(r["flux"]),
                sensor_id=ids[int(r["sensor_idx"])] if ids else str(r["sensor_idx"]),
                pass_index=int(r["pass_index"]),
                interaction_index=int(r["interaction_index"]),
            )

    def subset(self, mask_or_indices):
        return Dataset(records=self.records[mask_or_indices].copy(),
                       metadata=dict(self.metadata))


def concat_datasets(datasets):
    """Merge per-sensor datasets, remapping sensor indices."""
    all_ids = []
    parts = []
    for ds in datasets:
        offset = len(all_ids)
        ids = ds.sensor_ids or [str(i) for i in np.unique(ds.records["sensor_idx"])]
        all_ids.extend(ids)
        rec = ds.records.copy()
        rec["sensor_idx"] += offset
        parts.append(rec)
    merged = np.concatenate(parts)
    return Dataset(records=merged, metadata={"sensor_ids": all_ids})


def snake_grid_locations(span=GRID_SPAN, n=GRID_N, corner_cut=2):
    """65 grid points in snake order: 9x9 minus a 2x2 block per corner."""
    coords = np.linspace(-span / 2, span / 2, n)
    locations = []
    for row, y in enumerate(coords):
        xs = list(range(n))
        if row % 2 == 1:
            xs.reverse()
        for col in xs:
            near_edge_r = row < corner_cut or row >= n - corner_cut
            near_edge_c = col < corner_cut or col >= n - corner_cut
            if near_edge_r and near_edge_c:
                continue
            locations.append((float(coords[col]), float(y)))
    return locations


def _protocol_rng(sensor: SensorInstance, tag: int):
    return np.random.default_rng(
        [sensor.seed, tag, sensor.drift.interaction_count])


def _metadata(sensor, protocol, **params):
    md = {
        "protocol": protocol,
        "sensor_ids": [sensor.sensor_id],
        "sensor_seed": sensor.seed,
        "start_interaction": sensor.drift.interaction_count,
        "params": params,
    }
    md["config_hash"] = hashlib.sha256(
        json.dumps(md, sort_keys=True).encode()).hexdigest()[:16]
    return md


class _StaticFluxCache:
    """Memoizes noiseless contact flux per (location, depth, tip) key.

    Deformation does not depend on drift, so repeated visits to the same
    contact reuse one superposition evaluation.
    """

    def __init__(self, sensor: SensorInstance):
        self.sensor = sensor
        self.noload = static_flux(sensor)
        self._cache = {}

    def contact(self, contact: IndenterContact):
        key = (contact.location, contact.depth, contact.tip_radius)
        flux = self._cache.get(key)
        if flux is None:
            flux = static_flux(self.sensor, contact)
            self._cache[key] = flux
        return flux


def _noise(rng, sensor):
    if sensor.noise_sd > 0:
        return rng.normal(0.0, sensor.noise_sd, 15)
    return 0.0


def snake_grid_protocol(sensor: SensorInstance, passes: int,
                        baseline_mode="before_each", baseline_k=1,
                        depths=DEPTHS, tip_radius=3.0,
                        law: ContactLaw = ContactLaw()) -> Dataset:
    """Snake-grid passes: per pass, one sweep of 65 locations at each depth.

    Drift advances by one interaction per indentation.  The returned
    dataset is a pure function of the sensor state and arguments; the
    caller ages its own sensor with advance_sensor() when chaining runs.
    """
    if passes < 0:
        raise ValueError("passes must be >= 0")
    locations = snake_grid_locations()
    rng = _protocol_rng(sensor, tag=1)
    tracker = BaselineTracker(mode=baseline_mode, k=baseline_k)
    cache = _StaticFluxCache(sensor)

    schedule = [(p, float(d), loc) for p in range(passes)
                for d in depths for loc in locations]
    n = len(schedule)
    counts, soft, offsets = drift_path(sensor.drift, n, sensor.drift_params)
    records = np.zeros(n, dtype=_RECORD_DTYPE)

    tracker.observe_noload(cache.noload + sensor.drift.baseline_offset
                           + _noise(rng, sensor))
    for i, (pass_index, depth, loc) in enumerate(schedule):
        contact = IndenterContact(location=loc, depth=depth,
                                  tip_radius=tip_radius)
        if baseline_mode != "once":
            tracker.observe_noload(cache.noload + offsets[i] + _noise(rng, sensor))
        delta = tracker.delta(cache.contact(contact) + offsets[i]
                              + _noise(rng, sensor))
        drift = DriftState(interaction_count=int(counts[i]),
                           softening_factor=float(soft[i]),
                           baseline_offset=offsets[i])
        force = contact_force(contact, drift, law)
        records[i] = (0, pass_index, counts[i], loc[0], loc[1], depth,
                      force[0], force[1], force[2], delta)
    return Dataset(records=records,
                   metadata=_metadata(sensor, "snake_grid", passes=passes,
                                      baseline_mode=baseline_mode,
                                      baseline_k=baseline_k,
                                      depths=list(map(float, depths))))


def shear_drag_protocol(sensor: SensorInstance, spacing=2.0, depth=0.8,
                        drag_speed=10.0, tip_radius=3.0,
                        law: ContactLaw = ContactLaw()) -> Dataset:
    """Straight-line drags along x and y covering the sensing grid.

    Lines are spaced ``spacing`` mm apart; flux is sampled every
    ``spacing`` mm along each drag.  Samples carry full (Fx, Fy, Fz)
    labels with the tangential component along the drag direction.
    """
    if spacing <= 0:
        raise ValueError("spacing must be > 0")
    half = GRID_SPAN / 2
    lines = np.arange(-half, half + 1e-9, spacing)
    stations = np.arange(-half, half + 1e-9, spacing)
    rng = _protocol_rng(sensor, tag=2)
    tracker = BaselineTracker(mode="before_each")
    cache = _StaticFluxCache(sensor)

    schedule = []
    for axis in (0, 1):  # 0: drag along x, 1: drag along y
        vel = (drag_speed, 0.0) if axis == 0 else (0.0, drag_speed)
        for c in lines:
            for s in stations:
                loc = (float(s), float(c)) if axis == 0 else (float(c), float(s))
                schedule.append((axis, loc, vel))
    n = len(schedule)
    counts, soft, offsets = drift_path(sensor.drift, n, sensor.drift_params)
    records = np.zeros(n, dtype=_RECORD_DTYPE)
    tracker.observe_noload(cache.noload + sensor.drift.baseline_offset
                           + _noise(rng, sensor))
    for i, (axis, loc, vel) in enumerate(schedule):
        contact = IndenterContact(location=loc, depth=depth,
                                  tip_radius=tip_radius, drag_velocity=vel)
        tracker.observe_noload(cache.noload + offsets[i] + _noise(rng, sensor))
        delta = tracker.delta(cache.contact(contact) + offsets[i]
                              + _noise(rng, sensor))
        drift = DriftState(interaction_count=int(counts[i]),
                           softening_factor=float(soft[i]),
                           baseline_offset=offsets[i])
        force = contact_force(contact, drift, law)
        records[i] = (0, axis, counts[i], loc[0], loc[1], depth,
                      force[0], force[1], force[2], delta)
    return Dataset(records=records,
                   metadata=_metadata(sensor, "shear_drag", spacing=spacing,
                                      depth=depth, drag_speed=drag_speed))


@dataclass(frozen=True)
class LineTrajectory:
    """Order-indexed flux readings along one straight poke line.

    Only the traversal order is retained as supervision; no per-point
    location or force labels are stored.
    """

    start: tuple
    end: tuple
    n_points: int
    ordered_flux: np.ndarray  # (n_points, 15)

    @property
    def indices(self):
        return np.arange(self.n_points)


def line_adaptation_protocol(sensor: SensorInstance, n_lines: int,
                             points_per_line: int, seed: int = 0,
                             depth=0.8, manual=False,
                             location_jitter_sd=0.5, depth_jitter_sd=0.15,
                             min_length=8.0):
    """Unlabeled straight-line pokes for self-supervised adaptation.

    Random lines across the skin; flux deltas are recorded in traversal
    order.  ``manual=True`` emulates hand-held poking by jittering each
    point's location and depth.
    """
    if n_lines < 1:
        raise ValueError("n_lines must be >= 1")
    if points_per_line < 3:
        raise ValueError("points_per_line must be >= 3")
    rng = np.random.default_rng([seed, sensor.seed, 3])
    half = GRID_SPAN / 2
    trajectories = []
    for _ in range(n_lines):
        while True:
            p0 = rng.uniform(-half, half, 2)
            p1 = rng.uniform(-half, half, 2)
            if np.linalg.norm(p1 - p0) >= min_length:
                break
        ts = np.linspace(0.0, 1.0, points_per_line)
        flux = np.empty((points_per_line, 15))
        tracker = BaselineTracker(mode="before_each")
        for j, t in enumerate(ts):
            loc = p0 + t * (p1 - p0)
            d = depth
            if manual:
                loc = loc + rng.normal(0.0, location_jitter_sd, 2)
                loc = np.clip(loc, -half, half)
                d = max(0.1, depth + rng.normal(0.0, depth_jitter_sd))
            sensor = advance_sensor(sensor, 1)
            noload, _ = read_flux(sensor, None, rng)
            tracker.observe_noload(noload)
            raw, _ = read_flux(
                sensor, IndenterContact(location=tuple(loc), depth=d), rng)
            flux[j] = tracker.delta(raw)
        trajectories.append(LineTrajectory(start=tuple(p0), end=tuple(p1),
                                           n_points=points_per_line,
                                           ordered_flux=flux))
    return trajectories


@dataclass(frozen=True)
class TripletBatch:
    """Sampled (anchor, positive, negative) flux triples with their indices."""

    anchor: np.ndarray    # (n, 15)
    positive: np.ndarray
    negative: np.ndarray
    traj_index: np.ndarray
    i_anchor: np.ndarray
    i_positive: np.ndarray
    i_negative: np.ndarray

    def __len__(self):
        return len(self.anchor)

    def __iter__(self):
        for a, p, n in zip(self.anchor, self.positive, self.negative):
            yield a, p, n


def sample_triplets(trajectories, n_triplets: int, seed: int) -> TripletBatch:
    """Sample ordering-constrained triplets from line trajectories.

    Each triplet comes from a single trajectory; the positive's index is
    strictly closer to the anchor's than the negative's (integer indices,
    so the margin is at least one step).  Sampling is with replacement
    and deterministic in ``seed``.
    """
    trajectories = list(trajectories)
    for t in trajectories:
        if t.n_points < 3:
            raise ValueError("every trajectory needs >= 3 points")
    rng = np.random.default_rng(seed)
    lengths = np.array([t.n_points for t in trajectories])
    tsel = rng.integers(0, len(trajectories), n_triplets)
    ia = np.empty(n_triplets, dtype=int)
    ip = np.empty(n_triplets, dtype=int)
    in_ = np.empty(n_triplets, dtype=int)
    todo = np.arange(n_triplets)
    while len(todo):
        L = lengths[tsel[todo]]
        a, p, q = (np.floor(rng.random((3, len(todo))) * L)).astype(int)
        dp = np.abs(a - p)
        dq = np.abs(a - q)
        ok = (dp > 0) & (dq > 0) & (p != q) & (dp != dq)
        swap = dp > dq
        p2 = np.where(swap, q, p)
        q2 = np.where(swap, p, q)
        done = todo[ok]
        ia[done], ip[done], in_[done] = a[ok], p2[ok], q2[ok]
        todo = todo[~ok]
    flux = [t.ordered_flux for t in trajectories]
    anchor = np.stack([flux[t][i] for t, i in zip(tsel, ia)])
    positive = np.stack([flux[t][i] for t, i in zip(tsel, ip)])
    negative = np.stack([flux[t][i] for t, i in zip(tsel, in_)])
    return TripletBatch(anchor=anchor, positive=positive, negative=negative,
                        traj_index=tsel, i_anchor=ia, i_positive=ip,
                        i_negative=in_)


# ---------------------------------------------------------------------------
# dataset container: JSON metadata header + fixed-width binary records

_DATASET_MAGIC = b"MSKD"
_DATASET_VERSION = 1


def save_dataset(dataset: Dataset, path):
    header = {
        "version": _DATASET_VERSION,
        "n_samples": len(dataset.records),
        "metadata": dataset.metadata,
    }
    head = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_DATASET_MAGIC)
        f.write(struct.pack("<I", len(head)))
        f.write(head)
        f.write(dataset.records.tobytes())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != _DATASET_MAGIC:
        raise ValueError(f"{path}: not a dataset container")
    (hlen,) = struct.unpack("<I", data[4:8])
    header = json.loads(data[8:8 + hlen])
    if header["version"] != _DATASET_VERSION:
        raise ValueError(f"unsupported dataset version {header['version']}")
    records = np.frombuffer(data[8 + hlen:], dtype=_RECORD_DTYPE).copy()
    if len(records) != header["n_samples"]:
        raise ValueError("truncated dataset container")
    return Dataset(records=records, metadata=header["metadata"])


def dataset_to_csv(dataset: Dataset) -> str:
    cols = ["sensor_idx", "pass_index", "interaction_index", "x", "y",
            "depth", "fx", "fy", "fz"] + [f"flux{i}" for i in range(15)]
    out = io.StringIO()
    out.write(",".join(cols) + "\n")
    for r in dataset.records:
        vals = [str(int(r["sensor_idx"])), str(int(r["pass_index"])),
                str(int(r["interaction_index"]))]
        vals += [repr(float(r[c])) for c in ("x", "y", "depth", "fx", "fy", "fz")]
        vals += [repr(float(v)) for v in r["flux"]]
        out.write(",".join(vals) + "\n")
    return out.getvalue()
