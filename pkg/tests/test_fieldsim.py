import numpy as np
import pytest

from magskin import fieldsim
from magskin.fieldsim import (
    BoardGeometry, ContactLaw, DriftParams, DriftState, IndenterContact,
    SingularFieldError, VariationParams, advance_drift, advance_sensor,
    contact_force, deform, dipole_field, drift_path, load_sensor,
    make_sensor, nominal_grid, read_flux, save_sensor, static_flux,
    superpose_fields)


def oracle_dipole(position, moment, observation):
    # written out component by component, no vector shortcuts
    rx = observation[0] - position[0]
    ry = observation[1] - position[1]
    rz = observation[2] - position[2]
    d = (rx * rx + ry * ry + rz * rz) ** 0.5
    ux, uy, uz = rx / d, ry / d, rz / d
    mdotu = moment[0] * ux + moment[1] * uy + moment[2] * uz
    return np.array([
        (3.0 * mdotu * ux - moment[0]) / d**3,
        (3.0 * mdotu * uy - moment[1]) / d**3,
        (3.0 * mdotu * uz - moment[2]) / d**3,
    ])


def test_dipole_field_matches_oracle():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        pos = rng.uniform(-10, 10, 3)
        mom = rng.uniform(-2, 2, 3)
        obs = rng.uniform(-10, 10, 3)
        if np.linalg.norm(obs - pos) < 1e-3:
            continue
        got = dipole_field(pos, mom, obs)
        want = oracle_dipole(pos, mom, obs)
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-15)


def test_dipole_field_singular():
    with pytest.raises(SingularFieldError):
        dipole_field([1, 2, 3], [0, 0, 1], [1, 2, 3])


def test_superposition_equals_sum_of_dipoles():
    geometry = BoardGeometry()
    grid = nominal_grid(geometry)
    obs = geometry.magnetometer_points()
    total = superpose_fields(grid, obs)
    manual = np.zeros_like(total)
    for i, o in enumerate(obs):
        for p, m in zip(grid.positions, grid.moments):
            manual[i] += dipole_field(p, m, o)
    np.testing.assert_allclose(total, manual, rtol=1e-10, atol=1e-12)


def test_field_linear_in_moment():
    rng = np.random.default_rng(5)
    pos = rng.uniform(-5, 5, 3)
    obs = pos + rng.uniform(1, 3, 3)
    m1 = rng.uniform(-1, 1, 3)
    m2 = rng.uniform(-1, 1, 3)
    lhs = dipole_field(pos, 2.0 * m1 + 0.5 * m2, obs)
    rhs = 2.0 * dipole_field(pos, m1, obs) + 0.5 * dipole_field(pos, m2, obs)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-10, atol=1e-14)


def _plain_sensor(seed=0, enabled=False, noise_sd=0.0):
    return make_sensor(BoardGeometry(), VariationParams.zero(), seed=seed,
                       drift_params=DriftParams(seed=seed, enabled=enabled),
                       noise_sd=noise_sd)


def test_central_contact_strongest_at_central_magnetometer():
    sensor = _plain_sensor()
    noload = static_flux(sensor)
    center = static_flux(sensor, IndenterContact((0.0, 0.0), 1.0)) - noload
    corner = static_flux(sensor, IndenterContact((7.0, 7.0), 1.0)) - noload
    # bz of the central chip responds more to a central press
    assert abs(center[2]) > abs(corner[2])


def test_deform_keeps_dipoles_above_board():
    grid = nominal_grid(BoardGeometry())
    pressed = deform(grid, IndenterContact((0.0, 0.0), 1.2), 2.0)
    assert pressed.positions[:, 2].min() >= 0.0
    assert np.any(pressed.positions != grid.positions)


def test_deform_zero_depth_is_identity():
    grid = nominal_grid(BoardGeometry())
    assert deform(grid, IndenterContact((1.0, 1.0), 0.0), 2.0) is grid


def test_contact_force_hertz_value():
    # Fz = E* * 4/3 * sqrt(R) * d^1.5 with the defaults
    f = contact_force(IndenterContact((0, 0), 1.2), DriftState())
    want = (4.0 / 3.0) * 1.0 * np.sqrt(3.0) * 1.2**1.5
    np.testing.assert_allclose(f, [0.0, 0.0, want], rtol=1e-12)


def test_contact_force_drag_friction():
    f = contact_force(IndenterContact((0, 0), 1.0, drag_velocity=(10.0, 0.0)),
                      DriftState())
    assert f[0] == pytest.approx(0.4 * f[2])
    assert f[1] == 0.0


def test_softening_bounds_at_50k():
    params = DriftParams(seed=0)
    state = advance_drift(DriftState(), 50_000, params)
    assert 0.7 <= state.softening_factor <= 0.95
    # monotone decreasing toward the asymptote
    mid = advance_drift(DriftState(), 10_000, params)
    assert state.softening_factor < mid.softening_factor < 1.0


def test_drift_advance_split_invariant():
    params = DriftParams(seed=3)
    one_go = advance_drift(DriftState(), 5000, params)
    stepped = DriftState()
    for n in (1, 999, 1024, 1500, 1476):
        stepped = advance_drift(stepped, n, params)
    assert stepped.interaction_count == one_go.interaction_count == 5000
    np.testing.assert_allclose(stepped.baseline_offset, one_go.baseline_offset,
                               rtol=0, atol=1e-15)
    assert stepped.softening_factor == pytest.approx(one_go.softening_factor)


def test_drift_path_matches_stepwise():
    params = DriftParams(seed=9)
    counts, soft, offsets = drift_path(DriftState(), 300, params)
    state = DriftState()
    for i in range(300):
        state = advance_drift(state, 1, params)
        assert counts[i] == state.interaction_count
        np.testing.assert_allclose(offsets[i], state.baseline_offset,
                                   atol=1e-15)


def test_drift_disabled_is_inert():
    sensor = _plain_sensor(enabled=False)
    aged = advance_sensor(sensor, 10_000)
    assert aged.drift.softening_factor == 1.0
    np.testing.assert_array_equal(aged.drift.baseline_offset, np.zeros(15))


def test_variation_changes_flux_deterministically():
    a = make_sensor(BoardGeometry(), VariationParams(), seed=1)
    b = make_sensor(BoardGeometry(), VariationParams(), seed=2)
    a2 = make_sensor(BoardGeometry(), VariationParams(), seed=1)
    assert not np.allclose(static_flux(a), static_flux(b))
    np.testing.assert_array_equal(static_flux(a), static_flux(a2))


def test_read_flux_noise_and_drift_offset():
    sensor = _plain_sensor(noise_sd=0.01)
    rng = np.random.default_rng(0)
    clean, temps = read_flux(sensor)
    noisy, _ = read_flux(sensor, rng=rng)
    assert temps.shape == (5,)
    assert not np.allclose(clean, noisy)
    shifted = fieldsim.SensorInstance(
        geometry=sensor.geometry, grid=sensor.grid,
        drift=DriftState(baseline_offset=np.full(15, 0.5)),
        drift_params=sensor.drift_params, noise_sd=0.0)
    np.testing.assert_allclose(read_flux(shifted)[0], clean + 0.5, atol=1e-12)


def test_sensor_snapshot_round_trip(tmp_path):
    sensor = make_sensor(BoardGeometry(), VariationParams(), seed=42,
                         drift_params=DriftParams(seed=42))
    sensor = advance_sensor(sensor, 123)
    path = tmp_path / "s.msks"
    save_sensor(sensor, path)
    back = load_sensor(path)
    np.testing.assert_array_equal(back.grid.positions, sensor.grid.positions)
    np.testing.assert_array_equal(back.grid.moments, sensor.grid.moments)
    np.testing.assert_array_equal(back.drift.baseline_offset,
                                  sensor.drift.baseline_offset)
    assert back.drift.interaction_count == 123
    assert back.sensor_id == sensor.sensor_id
    np.testing.assert_array_equal(static_flux(back), static_flux(sensor))


def test_standoff_variant_changes_geometry():
    base = BoardGeometry()
    flexed = base.with_standoff(base.sensor_standoff * 0.2)
    assert flexed.sensor_standoff == pytest.approx(0.2)
    assert flexed.magnetometer_points()[0, 2] == pytest.approx(-0.2)
