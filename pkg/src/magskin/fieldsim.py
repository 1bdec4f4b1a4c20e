"""Physics simulator for a magnetized elastomer skin read by five magnetometers.

The skin is modelled as a grid of point dipoles embedded in an elastomer
slab.  A hemispherical indenter deforms the slab; the displaced dipoles
change the superposed magnetic field at the magnetometer positions below
the slab.  Per-sensor fabrication variation, measurement noise and slow
drift (elastomer softening + baseline wander) are all modelled explicitly
and driven by explicit seeds so every quantity is reproducible.

Units: positions in mm, forces in N, flux in arbitrary consistent units
(the unit constant of the dipole law is 1; decoders normalize inputs, so
absolute flux scale is irrelevant).
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

# Dipole-law unit constant. Arbitrary: absolute flux scale is not physical.
FIELD_CONSTANT = 1.0

# Random-walk block size for the drift baseline; walking in fixed blocks
# keeps advance(n) independent of how the n steps are split across calls.
_WALK_BLOCK = 1024

# Typical no-load flux norm of the canonical sensor, used to express the
# drift-walk and noise defaults as relative magnitudes (see calibrate.py).
TYPICAL_NOLOAD_NORM = 1.03
# Typical contact flux-delta norm (median over the grid, 1.2 mm depth).
TYPICAL_DELTA_NORM = 0.10

DEFAULT_NOISE_SD = 0.005 * TYPICAL_DELTA_NORM / np.sqrt(15.0)


class SingularFieldError(ValueError):
    """Observation point coincides with a dipole position."""


@dataclass(frozen=True)
class BoardGeometry:
    """Placement of the five magnetometers relative to the skin.

    ``magnetometer_positions`` are (x, y) in skin-plane mm, origin at the
    sensing-area center.  The magnetometer plane sits ``sensor_standoff``
    mm below the elastomer underside (z = 0); the elastomer occupies
    0 <= z <= skin_thickness.
    """

    magnetometer_positions: tuple = (
        (0.0, 0.0),
        (7.0, 0.0),
        (-7.0, 0.0),
        (0.0, 7.0),
        (0.0, -7.0),
    )
    skin_thickness: float = 2.0
    sensor_standoff: float = 1.0
    sensing_area: tuple = (20.0, 20.0)

    def __post_init__(self):
        if len(self.magnetometer_positions) != 5:
            raise ValueError("exactly 5 magnetometer positions required")
        if self.skin_thickness <= 0:
            raise ValueError("skin_thickness must be > 0")
        if self.sensor_standoff < 0:
            raise ValueError("sensor_standoff must be >= 0")

    def magnetometer_points(self, standoff_offset=0.0):
        """(5, 3) observation points, z below the elastomer underside."""
        xy = np.asarray(self.magnetometer_positions, dtype=float)
        z = -(self.sensor_standoff + standoff_offset)
        return np.column_stack([xy, np.full(5, z)])

    def with_standoff(self, standoff):
        return replace(self, sensor_standoff=standoff)


@dataclass(frozen=True)
class DipoleGrid:
    """Discretization of the magnetized composite as point dipoles."""

    positions: np.ndarray  # (N, 3) mm
    moments: np.ndarray    # (N, 3)
    grid_dims: tuple       # (nx, ny, nz)

    def __post_init__(self):
        nx, ny, nz = self.grid_dims
        if len(self.positions) != nx * ny * nz:
            raise ValueError("positions inconsistent with grid_dims")
        if not np.any(np.linalg.norm(self.moments, axis=1) > 0):
            raise ValueError("grid is not magnetized")


def nominal_grid(geometry: BoardGeometry, nx=10, ny=10, nz=2, span=22.0,
                 moment_magnitude=1.0) -> DipoleGrid:
    """Unperturbed dipole grid with the 4x4 alternating magnetization.

    The grid spans ``span`` mm in x and y (slightly larger than the
    sensing area, modelling edge material) and fills the slab thickness.
    Moments point +/-z in a 4x4 checkerboard of blocks, mimicking a grid
    of small cube magnets used to magnetize the composite; the strong
    block edges give the field the spatial gradients the decoder needs.
    """
    xs = (np.arange(nx) + 0.5) / nx * span - span / 2
    ys = (np.arange(ny) + 0.5) / ny * span - span / 2
    zs = (np.arange(nz) + 0.5) / nz * geometry.skin_thickness
    X, Y, Z = np.meshgrid(xs, ys, zs, indexing="ij")
    positions = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])

    # blocks are shifted by half a pitch so the skin center sits inside a
    # uniformly magnetized block, not on a cancellation node
    pitch = span / 4
    bx = np.clip(np.floor((positions[:, 0] + span / 2 + pitch / 2) / pitch).astype(int), 0, 3)
    by = np.clip(np.floor((positions[:, 1] + span / 2 + pitch / 2) / pitch).astype(int), 0, 3)
    signs = np.where((bx + by) % 2 == 0, 1.0, -1.0)
    moments = np.zeros_like(positions)
    moments[:, 2] = signs * moment_magnitude
    return DipoleGrid(positions=positions, moments=moments, grid_dims=(nx, ny, nz))


@dataclass(frozen=True)
class VariationParams:
    """Fabrication-variation magnitudes applied when a sensor is drawn."""

    moment_scale_sd: float = 0.1
    moment_angle_sd: float = 0.05   # rad
    position_jitter_sd: float = 0.2  # mm
    standoff_offset_sd: float = 0.1  # mm

    def __post_init__(self):
        for name in ("moment_scale_sd", "moment_angle_sd",
                     "position_jitter_sd", "standoff_offset_sd"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @classmethod
    def zero(cls):
        return cls(0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class DriftParams:
    """Dynamics of elastomer softening and baseline wander."""

    softening_asymptote: float = 0.85
    time_constant: float = 30000.0        # interactions
    walk_sd: float = 1e-4 * TYPICAL_NOLOAD_NORM
    seed: int = 0
    enabled: bool = True


@dataclass(frozen=True)
class DriftState:
    """Current ageing state of one sensor."""

    interaction_count: int = 0
    softening_factor: float = 1.0
    baseline_offset: np.ndarray = field(default_factory=lambda: np.zeros(15))

    def __post_init__(self):
        if self.interaction_count < 0:
            raise ValueError("interaction_count must be >= 0")
        if not (0 < self.softening_factor <= 1):
            raise ValueError("softening_factor must be in (0, 1]")


@dataclass(frozen=True)
class IndenterContact:
    """One quasi-static press (optionally a drag) of the indenter."""

    location: tuple          # (x, y) mm, sensing-area coordinates
    depth: float             # mm
    tip_radius: float = 3.0  # mm
    drag_velocity: tuple | None = None  # (vx, vy) mm/s

    def __post_init__(self):
        if self.depth < 0:
            raise ValueError("depth must be >= 0")


@dataclass(frozen=True)
class ContactLaw:
    """Hertzian normal force plus Coulomb friction for drags.

    effective_modulus is in N/mm^2; chosen so a 1.2 mm indentation with
    the default 3 mm tip yields ~3 N.
    """

    effective_modulus: float = 1.0
    friction_coefficient: float = 0.4


@dataclass(frozen=True)
class SensorInstance:
    """One simulated skin-plus-board combination."""

    geometry: BoardGeometry
    grid: DipoleGrid
    drift: DriftState
    drift_params: DriftParams
    standoff_offset: float = 0.0
    noise_sd: float = DEFAULT_NOISE_SD
    seed: int = 0
    sensor_id: str = "sensor-0"


def dipole_field(position, moment, observation, k=FIELD_CONSTANT):
    """Magnetic field of a point dipole at one observation point.

    B = k * (3 (m . r_hat) r_hat - m) / |r|^3, r = observation - position.
    """
    r = np.asarray(observation, dtype=float) - np.asarray(position, dtype=float)
    d = np.linalg.norm(r)
    if d == 0:
        raise SingularFieldError("observation coincides with dipole position")
    rhat = r / d
    m = np.asarray(moment, dtype=float)
    return k * (3.0 * np.dot(m, rhat) * rhat - m) / d**3


def superpose_fields(grid: DipoleGrid, observations, k=FIELD_CONSTANT):
    """(M, 3) summed dipole field at each of M observation points."""
    obs = np.asarray(observations, dtype=float)
    r = obs[:, None, :] - grid.positions[None, :, :]           # (M, N, 3)
    d = np.linalg.norm(r, axis=2)                              # (M, N)
    if np.any(d == 0):
        raise SingularFieldError("observation coincides with dipole position")
    rhat = r / d[..., None]
    mdot = np.einsum("mnk,nk->mn", rhat, grid.moments)
    B = k * (3.0 * mdot[..., None] * rhat - grid.moments[None]) / d[..., None] ** 3
    return B.sum(axis=1)


def deform(grid: DipoleGrid, contact: IndenterContact,
           skin_thickness: float = 2.0) -> DipoleGrid:
    """Displace dipoles under the indenter.

    Vertical displacement is a Gaussian bump of width sigma = tip_radius
    centered at the contact, scaled linearly through the thickness so the
    skin underside (bonded to the board) stays fixed and dipoles never
    cross the magnetometer plane.  Lateral displacement pushes material
    radially outward, proportional to the bump gradient with a
    Poisson-like factor of 0.3.
    """
    if contact.depth < 0:
        raise ValueError("depth must be >= 0")
    if contact.depth == 0:
        return grid

    x0, y0 = contact.location
    sigma = contact.tip_radius
    pos = grid.positions
    dx = pos[:, 0] - x0
    dy = pos[:, 1] - y0
    r2 = dx**2 + dy**2
    bump = np.exp(-r2 / (2.0 * sigma**2))
    depth_frac = np.clip(pos[:, 2] / skin_thickness, 0.0, 1.0)

    w = contact.depth * bump * depth_frac
    r = np.sqrt(r2)
    # radial gradient of the bump, with the r -> 0 limit handled
    radial = 0.3 * contact.depth * (r / sigma) * bump * depth_frac
    with np.errstate(invalid="ignore", divide="ignore"):
        ux = np.where(r > 0, radial * dx / r, 0.0)
        uy = np.where(r > 0, radial * dy / r, 0.0)

    new_pos = pos.copy()
    new_pos[:, 0] += ux
    new_pos[:, 1] += uy
    new_pos[:, 2] -= w
    return replace(grid, positions=new_pos)


def make_sensor(geometry: BoardGeometry, variation: VariationParams, seed: int,
                drift_params: DriftParams | None = None,
                noise_sd: float = DEFAULT_NOISE_SD,
                sensor_id: str | None = None,
                grid_kwargs: dict | None = None) -> SensorInstance:
    """Draw one sensor instance; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    grid = nominal_grid(geometry, **(grid_kwargs or {}))
    n = len(grid.positions)

    moments = grid.moments.copy()
    scales = 1.0 + rng.normal(0.0, variation.moment_scale_sd, n)
    moments *= np.clip(scales, 0.05, None)[:, None]
    angles = rng.normal(0.0, variation.moment_angle_sd, n)
    axes = rng.normal(size=(n, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    moments = _rotate_about_axes(moments, axes, angles)

    positions = grid.positions + rng.normal(0.0, variation.position_jitter_sd, (n, 3))
    standoff_offset = float(rng.normal(0.0, variation.standoff_offset_sd))
    # never let the magnetometer plane reach the skin underside
    standoff_offset = max(standoff_offset, -0.8 * geometry.sensor_standoff)

    if drift_params is None:
        drift_params = DriftParams(seed=seed)
    return SensorInstance(
        geometry=geometry,
        grid=replace(grid, positions=positions, moments=moments),
        drift=DriftState(),
        drift_params=drift_params,
        standoff_offset=standoff_offset,
        noise_sd=noise_sd,
        seed=seed,
        sensor_id=sensor_id if sensor_id is not None else f"sensor-{seed}",
    )


def _rotate_about_axes(vectors, axes, angles):
    """Rodrigues rotation of each vector about its own axis/angle."""
    cos = np.cos(angles)[:, None]
    sin = np.sin(angles)[:, None]
    cross = np.cross(axes, vectors)
    dot = np.einsum("ij,ij->i", axes, vectors)[:, None]
    return vectors * cos + cross * sin + axes * dot * (1.0 - cos)


def static_flux(sensor: SensorInstance,
                contact: IndenterContact | None = None) -> np.ndarray:
    """Noiseless, drift-free superposition flux for a (possibly deformed)
    grid; depends only on the contact geometry, so callers may cache it."""
    grid = sensor.grid
    if contact is not None and contact.depth > 0:
        grid = deform(grid, contact, sensor.geometry.skin_thickness)
    obs = sensor.geometry.magnetometer_points(sensor.standoff_offset)
    return superpose_fields(grid, obs).ravel()


def read_flux(sensor: SensorInstance, contact: IndenterContact | None = None,
              rng: np.random.Generator | None = None):
    """One 20-value readout: 15 flux components + 5 temperatures.

    Flux is the dipole superposition at the five magnetometers (deformed
    grid when a contact is applied), plus the drift baseline offset, plus
    Gaussian noise with SD ``sensor.noise_sd`` when an rng is supplied.
    """
    flux = static_flux(sensor, contact).copy()
    flux += sensor.drift.baseline_offset
    if rng is not None and sensor.noise_sd > 0:
        flux += rng.normal(0.0, sensor.noise_sd, 15)
    temps = 25.0 + 0.1 * np.arange(5.0)
    return flux, temps


def contact_force(contact: IndenterContact, drift: DriftState,
                  law: ContactLaw = ContactLaw()) -> np.ndarray:
    """Ground-truth (Fx, Fy, Fz) for one contact.

    Fz follows the Hertz law scaled by the current softening factor;
    dragging adds a Coulomb tangential component along the drag direction.
    """
    if contact.depth < 0:
        raise ValueError("depth must be >= 0")
    fz = (drift.softening_factor * (4.0 / 3.0) * law.effective_modulus
          * np.sqrt(contact.tip_radius) * contact.depth**1.5)
    f = np.array([0.0, 0.0, fz])
    if contact.drag_velocity is not None and fz > 0:
        v = np.asarray(contact.drag_velocity, dtype=float)
        speed = np.linalg.norm(v)
        if speed > 0:
            f[:2] = law.friction_coefficient * fz * v / speed
    return f


def _softening(n, params: DriftParams):
    a = params.softening_asymptote
    return a + (1.0 - a) * np.exp(-n / params.time_constant)


def _walk_steps(params: DriftParams, start, count):
    """Baseline random-walk steps start..start+count-1, block-seeded.

    Blocked seeding makes the walk a pure function of the step index, so
    advancing by 1 n times equals advancing by n once.
    """
    steps = np.empty((count, 15))
    i = 0
    while i < count:
        idx = start + i
        block = idx // _WALK_BLOCK
        off = idx % _WALK_BLOCK
        take = min(count - i, _WALK_BLOCK - off)
        rng = np.random.default_rng([params.seed, 0x5EED, block])
        block_steps = rng.normal(0.0, params.walk_sd, (_WALK_BLOCK, 15))
        steps[i:i + take] = block_steps[off:off + take]
        i += take
    return steps


def advance_drift(drift: DriftState, n_interactions: int,
                  params: DriftParams) -> DriftState:
    """Age the sensor by n interactions; pure in (state, n, params.seed)."""
    if n_interactions < 0:
        raise ValueError("n_interactions must be >= 0")
    if n_interactions == 0 or not params.enabled:
        return drift
    n0 = drift.interaction_count
    n1 = n0 + n_interactions
    offset = drift.baseline_offset + _walk_steps(params, n0, n_interactions).sum(axis=0)
    return DriftState(
        interaction_count=n1,
        softening_factor=float(_softening(n1, params)),
        baseline_offset=offset,
    )


def drift_path(drift: DriftState, n_interactions: int,
               params: DriftParams):
    """Per-interaction drift trajectory for the next n interactions.

    Returns (counts, softening, offsets): entry i is the state after
    interaction i, identical to applying advance_drift one step at a
    time but computed in one pass.
    """
    n = n_interactions
    if not params.enabled or n == 0:
        counts = np.full(n, drift.interaction_count, dtype=int)
        soft = np.full(n, drift.softening_factor)
        offsets = np.tile(drift.baseline_offset, (n, 1))
        return counts, soft, offsets
    counts = drift.interaction_count + 1 + np.arange(n)
    soft = _softening(counts, params)
    steps = _walk_steps(params, drift.interaction_count, n)
    offsets = drift.baseline_offset + np.cumsum(steps, axis=0)
    return counts, soft, offsets


def advance_sensor(sensor: SensorInstance, n_interactions: int) -> SensorInstance:
    return replace(sensor, drift=advance_drift(sensor.drift, n_interactions,
                                               sensor.drift_params))


# ---------------------------------------------------------------------------
# serialization: versioned binary snapshot of a sensor instance

_SNAPSHOT_MAGIC = b"MSKS"
_SNAPSHOT_VERSION = 1


def save_sensor(sensor: SensorInstance, path):
    """Versioned binary snapshot; loads back bit-identically."""
    header = {
        "version": _SNAPSHOT_VERSION,
        "sensor_id": sensor.sensor_id,
        "seed": sensor.seed,
        "noise_sd": sensor.noise_sd,
        "standoff_offset": sensor.standoff_offset,
        "geometry": {
            "magnetometer_positions": [list(p) for p in sensor.geometry.magnetometer_positions],
            "skin_thickness": sensor.geometry.skin_thickness,
            "sensor_standoff": sensor.geometry.sensor_standoff,
            "sensing_area": list(sensor.geometry.sensing_area),
        },
        "grid_dims": list(sensor.grid.grid_dims),
        "drift": {
            "interaction_count": sensor.drift.interaction_count,
            "softening_factor": sensor.drift.softening_factor,
        },
        "drift_params": {
            "softening_asymptote": sensor.drift_params.softening_asymptote,
            "time_constant": sensor.drift_params.time_constant,
            "walk_sd": sensor.drift_params.walk_sd,
            "seed": sensor.drift_params.seed,
            "enabled": sensor.drift_params.enabled,
        },
    }
    head = json.dumps(header, sort_keys=True).encode()
    blob = io.BytesIO()
    blob.write(_SNAPSHOT_MAGIC)
    blob.write(struct.pack("<I", len(head)))
    blob.write(head)
    for arr in (sensor.grid.positions, sensor.grid.moments,
                sensor.drift.baseline_offset):
        blob.write(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
    with open(path, "wb") as f:
        f.write(blob.getvalue())


def load_sensor(path) -> SensorInstance:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != _SNAPSHOT_MAGIC:
        raise ValueError(f"{path}: not a sensor snapshot")
    (hlen,) = struct.unpack("<I", data[4:8])
    header = json.loads(data[8:8 + hlen])
    if header["version"] != _SNAPSHOT_VERSION:
        raise ValueError(f"unsupported snapshot version {header['version']}")
    off = 8 + hlen
    dims = tuple(header["grid_dims"])
    n = dims[0] * dims[1] * dims[2]
    positions = np.frombuffer(data[off:off + n * 24]).reshape(n, 3).copy()
    off += n * 24
    moments = np.frombuffer(data[off:off + n * 24]).reshape(n, 3).copy()
    off += n * 24
    baseline = np.frombuffer(data[off:off + 120]).copy()
    g = header["geometry"]
    geometry = BoardGeometry(
        magnetometer_positions=tuple(tuple(p) for p in g["magnetometer_positions"]),
        skin_thickness=g["skin_thickness"],
        sensor_standoff=g["sensor_standoff"],
        sensing_area=tuple(g["sensing_area"]),
    )
    dp = header["drift_params"]
    return SensorInstance(
        geometry=geometry,
        grid=DipoleGrid(positions=positions, moments=moments, grid_dims=dims),
        drift=DriftState(
            interaction_count=header["drift"]["interaction_count"],
            softening_factor=header["drift"]["softening_factor"],
            baseline_offset=baseline,
        ),
        drift_params=DriftParams(
            softening_asymptote=dp["softening_asymptote"],
            time_constant=dp["time_constant"],
            walk_sd=dp["walk_sd"],
            seed=dp["seed"],
            enabled=dp["enabled"],
        ),
        standoff_offset=header["standoff_offset"],
        noise_sd=header["noise_sd"],
        seed=header["seed"],
        sensor_id=header["sensor_id"],
    )
