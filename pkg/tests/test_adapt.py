import numpy as np
import pytest

from magskin import adapt, datagen, neural
from magskin.adapt import (
    AdaptationSet, Fleet, LabelLeakError, MultiSensorDataset,
    audit_no_labels, collect_adaptation_set, make_fleet,
    self_supervised_adapt, train_multisensor)
from magskin.fieldsim import (BoardGeometry, DriftParams, VariationParams,
                              make_sensor)


@pytest.fixture(scope="module")
def tiny_fleet():
    return make_fleet(n_boards=3, skins_per_board=2, seed=0, passes=1)


def test_fleet_layout(tiny_fleet):
    assert len(tiny_fleet.sensors) == 6
    assert set(tiny_fleet.data.folds) == {0, 1, 2}
    for b, held_out in tiny_fleet.data.folds.items():
        assert len(held_out) == 2
        for sid in held_out:
            assert tiny_fleet.board_of[sid] == b


def test_fold_hygiene(tiny_fleet):
    for fold in tiny_fleet.data.folds:
        train = set(tiny_fleet.data.train_ids(fold))
        test = set(tiny_fleet.data.test_ids(fold))
        assert not train & test
        assert train | test == set(tiny_fleet.data.sensor_ids)


def test_bad_fold_layouts_rejected(tiny_fleet):
    ids = tiny_fleet.data.sensor_ids
    datasets = dict(tiny_fleet.data.datasets)
    with pytest.raises(ValueError):
        MultiSensorDataset(datasets=datasets, folds={0: ids})  # empty train
    with pytest.raises(ValueError):
        MultiSensorDataset(datasets=datasets, folds={0: ["ghost"]})
    with pytest.raises(ValueError):
        MultiSensorDataset(datasets=datasets, folds={0: [ids[0], ids[0]]})


def test_same_board_shares_standoff(tiny_fleet):
    s0 = tiny_fleet.sensors["b0s0"]
    s1 = tiny_fleet.sensors["b0s1"]
    other = tiny_fleet.sensors["b1s0"]
    assert s0.geometry.sensor_standoff == s1.geometry.sensor_standoff
    assert s0.geometry.sensor_standoff != other.geometry.sensor_standoff
    assert s0.geometry.magnetometer_positions == s1.geometry.magnetometer_positions
    # skins on one board still differ magnetically
    assert not np.allclose(s0.grid.moments, s1.grid.moments)


def test_fleet_deterministic():
    a = make_fleet(n_boards=2, skins_per_board=1, seed=4, passes=1)
    b = make_fleet(n_boards=2, skins_per_board=1, seed=4, passes=1)
    for sid in a.data.sensor_ids:
        np.testing.assert_array_equal(a.data.datasets[sid].flux,
                                      b.data.datasets[sid].flux)


def test_multisensor_needs_two_sensors(tiny_fleet):
    only = {"b0s0": tiny_fleet.data.datasets["b0s0"]}
    single = MultiSensorDataset(datasets=only, folds={})
    with pytest.raises(ValueError):
        train_multisensor(single, neural.TrainConfig(epochs=1),
                          use_triplet=False)


def test_pooled_shapes(tiny_fleet):
    X, y, locs, sidx = tiny_fleet.data.pooled(tiny_fleet.data.sensor_ids)
    assert X.shape == (6 * 390, 15)
    assert y.shape == (6 * 390, 3)
    assert locs.shape == (6 * 390, 2)
    assert set(sidx) == set(range(6))


def test_adaptation_set_strips_labels(tiny_fleet):
    sensor = tiny_fleet.sensors["b0s0"]
    aset = collect_adaptation_set(sensor, 39, seed=0)
    audit_no_labels(aset)  # must not raise
    assert aset.budget == 39
    assert sum(s.n_points for s in aset.sequences) == 39


def test_audit_catches_label_fields():
    class Leaky:
        def __init__(self):
            self.ordered_flux = np.zeros((5, 15))
            self.locations = np.zeros((5, 2))
    with pytest.raises(LabelLeakError):
        audit_no_labels(Leaky())
    with pytest.raises(LabelLeakError):
        audit_no_labels({"nested": [{"depth": 0.8}]})


def test_adaptation_set_from_trajectories():
    sensor = make_sensor(BoardGeometry(), VariationParams(), seed=9,
                         drift_params=DriftParams(seed=9, enabled=False))
    trajs = datagen.line_adaptation_protocol(sensor, n_lines=2,
                                             points_per_line=5)
    aset = AdaptationSet.from_trajectories(trajs)
    audit_no_labels(aset)
    assert aset.budget == 10


def test_zero_budget_is_noop(tiny_fleet):
    cfg = neural.TrainConfig(epochs=1)
    model = train_multisensor(tiny_fleet.data, cfg, use_triplet=False,
                              train_ids=tiny_fleet.data.train_ids(0))
    source = tiny_fleet.data.pooled(tiny_fleet.data.train_ids(0))
    sensor = tiny_fleet.sensors[tiny_fleet.data.test_ids(0)[0]]
    aset = collect_adaptation_set(sensor, 0, seed=0)
    adapted = self_supervised_adapt(model, aset, source, cfg, seed=0)
    for a, b in zip(adapted.parameters(), model.parameters()):
        np.testing.assert_array_equal(a, b)


def test_adaptation_changes_parameters(tiny_fleet):
    cfg = neural.TrainConfig(epochs=1, adapt_epochs=2)
    model = train_multisensor(tiny_fleet.data, cfg, use_triplet=True,
                              train_ids=tiny_fleet.data.train_ids(0))
    source = tiny_fleet.data.pooled(tiny_fleet.data.train_ids(0))
    sensor = tiny_fleet.sensors[tiny_fleet.data.test_ids(0)[0]]
    aset = collect_adaptation_set(sensor, 39, seed=0)
    adapted = self_supervised_adapt(model, aset, source, cfg, seed=0)
    assert any(not np.array_equal(a, b) for a, b in
               zip(adapted.parameters(), model.parameters()))
    # deterministic in the seed
    again = self_supervised_adapt(model, aset, source, cfg, seed=0)
    for a, b in zip(adapted.parameters(), again.parameters()):
        np.testing.assert_array_equal(a, b)


def test_freeze_head_keeps_head_parameters(tiny_fleet):
    cfg = neural.TrainConfig(epochs=1, adapt_epochs=1, freeze_head=True)
    model = train_multisensor(tiny_fleet.data, cfg, use_triplet=True,
                              train_ids=tiny_fleet.data.train_ids(0))
    source = tiny_fleet.data.pooled(tiny_fleet.data.train_ids(0))
    sensor = tiny_fleet.sensors[tiny_fleet.data.test_ids(0)[0]]
    aset = collect_adaptation_set(sensor, 39, seed=0)
    adapted = self_supervised_adapt(model, aset, source, cfg, seed=0)
    for i in range(model.feat_index, len(model.weights)):
        np.testing.assert_array_equal(adapted.weights[i], model.weights[i])
        np.testing.assert_array_equal(adapted.biases[i], model.biases[i])
    assert any(not np.array_equal(a, b) for a, b in
               zip(adapted.weights[:model.feat_index],
                   model.weights[:model.feat_index]))


def test_cross_validate_report_names(tiny_fleet):
    cfg = neural.TrainConfig(epochs=1, adapt_epochs=1)
    reports = adapt.cross_validate(tiny_fleet, cfg, budget=13)
    names = [r.condition for r in reports]
    assert names == [
        "Single-sensor",
        "Multi-sensor without triplet loss",
        "Multi-sensor with triplet loss",
        "Multi-sensor with triplet loss, adapted using 13 indentations",
    ]
    for r in reports:
        assert r.n_samples > 0
