import json
import os

import numpy as np
import pytest

from magskin import cli, datagen, neural
from magskin.config import DEFAULTS, ConfigError, RunConfig


# ---------------------------------------------------------------------------
# config


def test_defaults_complete():
    cfg = RunConfig()
    for key in DEFAULTS:
        assert getattr(cfg, key) == DEFAULTS[key]


def test_unknown_key_named_in_error():
    with pytest.raises(ConfigError, match="pases"):
        RunConfig({"pases": 3})


def test_type_checking():
    with pytest.raises(ConfigError, match="epochs"):
        RunConfig({"epochs": "many"})
    # ints promote to floats where a float is expected
    assert RunConfig({"tolerance": 2}).tolerance == 2.0


def test_hash_stable_across_key_order(tmp_path):
    a = tmp_path / "a.json"
    b = tmp_path / "b.json"
    a.write_text(json.dumps({"seed": 5, "passes": 2}))
    b.write_text(json.dumps({"passes": 2, "seed": 5}))
    assert RunConfig.load(a).hash() == RunConfig.load(b).hash()
    assert RunConfig.load(a).hash() != RunConfig().hash()


def test_hash_ignores_output_dir_and_jobs():
    h = RunConfig().hash()
    assert RunConfig({"output_dir": "/elsewhere", "jobs": 8}).hash() == h


def test_flag_overrides_win(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 5}))
    cfg = RunConfig.load(path, {"seed": 9})
    assert cfg.seed == 9


def test_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv("MAGSKIN_OUT", str(tmp_path / "envroot"))
    cfg = RunConfig()
    assert cfg.run_dir().startswith(str(tmp_path / "envroot"))


def test_bad_config_file(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        RunConfig.load(path)
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "missing.json")


# ---------------------------------------------------------------------------
# commands


def run_cli(*argv):
    return cli.main(list(argv))


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("sim")
    assert run_cli("simulate", "--n-boards", "1", "--skins-per-board", "1",
                   "--passes", "1", "--output-dir", str(root)) == 0
    (run_dir,) = [p for p in root.iterdir() if p.is_dir()]
    return run_dir / "datasets"


def test_simulate_single_sensor(sim_dir):
    manifest = json.loads((sim_dir / "manifest.json").read_text())
    assert len(manifest["files"]) == 1
    ds = datagen.load_dataset(sim_dir / "s0.mskd")
    assert len(ds.records) == 390


def test_simulate_fleet_and_manifest(tmp_path):
    assert run_cli("simulate", "--n-boards", "2", "--skins-per-board", "2",
                   "--passes", "1", "--output-dir", str(tmp_path)) == 0
    (run_dir,) = [p for p in tmp_path.iterdir() if p.is_dir()]
    manifest = json.loads((run_dir / "datasets" / "manifest.json").read_text())
    assert [f["sensor"] for f in manifest["files"]] == \
        ["b0s0", "b0s1", "b1s0", "b1s1"]
    for f in manifest["files"]:
        assert (run_dir / "datasets" / f["dataset"]).exists()
        assert (run_dir / "datasets" / f["snapshot"]).exists()


def test_train_eval_pipeline(sim_dir, tmp_path):
    train_out = tmp_path / "train"
    assert run_cli("train", "--data", str(sim_dir / "s0.mskd"),
                   "--epochs", "150", "--batch-size", "64",
                   "--val-fraction", "0.1",
                   "--output-dir", str(train_out)) == 0
    (run_dir,) = [p for p in train_out.iterdir() if p.is_dir()]
    ckpt = run_dir / "model.mskm"
    assert ckpt.exists()
    assert (run_dir / "training_log.csv").exists()

    eval_out = tmp_path / "eval"
    assert run_cli("eval", "--model", str(ckpt),
                   "--data", str(sim_dir / "s0.mskd"),
                   "--output-dir", str(eval_out)) == 0
    (eval_dir,) = [p for p in eval_out.iterdir() if p.is_dir()]
    for name in ("report.json", "report.csv", "report.md"):
        assert (eval_dir / name).exists()
    report = json.loads((eval_dir / "report.json").read_text())
    # same-sensor, same-split evaluation of a converged model
    assert report[0]["accuracy_mean"] >= 95.0


def test_adapt_budget_zero_byte_identical(sim_dir, tmp_path):
    train_out = tmp_path / "train"
    assert run_cli("train", "--data", str(sim_dir / "s0.mskd"),
                   "--epochs", "1", "--output-dir", str(train_out)) == 0
    (run_dir,) = [p for p in train_out.iterdir() if p.is_dir()]
    ckpt = run_dir / "model.mskm"

    adapt_out = tmp_path / "adapt"
    assert run_cli("adapt", "--model", str(ckpt),
                   "--source", str(sim_dir / "s0.mskd"),
                   "--target-sensor", str(sim_dir / "s0.msks"),
                   "--budget", "0", "--output-dir", str(adapt_out)) == 0
    (adapt_dir,) = [p for p in adapt_out.iterdir() if p.is_dir()]
    assert (adapt_dir / "adapted_model.mskm").read_bytes() == ckpt.read_bytes()


def test_eval_dimension_mismatch(sim_dir, tmp_path, capsys):
    model = neural.MlpModel(dims=(10, 4, 4, 3, 4, 4, 3), seed=0)
    ckpt = tmp_path / "bad.mskm"
    neural.save_model(model, ckpt)
    code = run_cli("eval", "--model", str(ckpt),
                   "--data", str(sim_dir / "s0.mskd"),
                   "--output-dir", str(tmp_path))
    assert code == 2
    assert "dimension" in capsys.readouterr().err


def test_exit_codes(tmp_path, capsys):
    assert run_cli("eval", "--preset", "nope",
                   "--output-dir", str(tmp_path)) == 2
    assert run_cli("train", "--data", str(tmp_path / "none.mskd"),
                   "--output-dir", str(tmp_path)) == 3
    capsys.readouterr()


def test_stream_record_decode_round_trip(tmp_path, capsys):
    blob = tmp_path / "s.bin"
    assert run_cli("stream", "--mode", "record", "--frames", "50",
                   "--out", str(blob)) == 0
    assert blob.stat().st_size == 50 * 92
    capsys.readouterr()
    assert run_cli("stream", "--mode", "decode", "--in", str(blob)) == 0
    captured = capsys.readouterr()
    lines = captured.out.strip().splitlines()
    assert lines[0].startswith("t_us,chip0_temp")
    assert len(lines) == 51
    assert "50 frames" in captured.err
    assert "0 CRC failures" in captured.err


def test_stream_decode_corrupted(tmp_path, capsys):
    blob = tmp_path / "s.bin"
    run_cli("stream", "--mode", "record", "--frames", "20", "--out", str(blob))
    raw = bytearray(blob.read_bytes())
    raw[5 * 92 + 40] ^= 0xFF
    blob.write_bytes(bytes(raw))
    capsys.readouterr()
    assert run_cli("stream", "--mode", "decode", "--in", str(blob)) == 0
    err = capsys.readouterr().err
    assert "1 CRC failures" in err


def test_presets_listing(capsys):
    assert run_cli("presets") == 0
    out = capsys.readouterr().out
    for name in ("table2", "fig5a_budget_sweep", "fig5b_sensor_sweep",
                 "flex_transfer", "manual_adapt", "drift"):
        assert name in out


def test_help_enumerates_config_keys(capsys):
    with pytest.raises(SystemExit):
        run_cli("eval", "--help")
    out = capsys.readouterr().out
    for key in DEFAULTS:
        assert "--" + key.replace("_", "-") in out


def test_preset_reports_reproducible(tmp_path):
    # scaled-down drift preset run twice into different roots
    args = ("eval", "--preset", "drift", "--total-interactions", "4000",
            "--train-prefix", "1000", "--eval-window", "200",
            "--eval-stride", "400", "--epochs", "8")
    assert run_cli(*args, "--output-dir", str(tmp_path / "r1")) == 0
    assert run_cli(*args, "--output-dir", str(tmp_path / "r2")) == 0
    (d1,) = [p for p in (tmp_path / "r1").iterdir() if p.is_dir()]
    (d2,) = [p for p in (tmp_path / "r2").iterdir() if p.is_dir()]
    assert d1.name == d2.name  # same config hash
    for name in ("report.json", "report.csv", "report.md",
                 "drift_curves.csv", "force_scatter.csv"):
        assert (d1 / name).read_bytes() == (d2 / name).read_bytes()
    assert (d1 / "drift_curves.png").exists()
    assert (d1 / "force_scatter.png").exists()
