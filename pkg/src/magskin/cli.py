"""Command-line entry point.

One binary with subcommands wiring configs to the simulator, data
generation, training, adaptation, evaluation and the wire protocol.
Every config key is exposed as a flag (flags win over the config file);
outputs land in a run directory named by the config hash so identical
configs overwrite byte-identical artifacts.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import glob as globmod
import json
import os
import sys
import time

import numpy as np

from . import adapt as adapt_mod
from . import datagen, drift, fieldsim, figures, metrics, neural, protocol
from .config import DEFAULTS, OUTPUT_ROOT_ENV, ConfigError, RunConfig

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

FRAME_PERIOD_US = 2500  # 400 Hz


def _add_config_flags(parser):
    group = parser.add_argument_group(
        "config overrides", "every key also loads from --config JSON; "
        "flags win")
    for key, default in DEFAULTS.items():
        flag = "--" + key.replace("_", "-")
        if isinstance(default, bool):
            group.add_argument(flag, dest=key, default=None,
                               action=argparse.BooleanOptionalAction,
                               help=f"(default: {default})")
        else:
            group.add_argument(flag, dest=key, default=None,
                               type=type(default),
                               help=f"(default: {default})")


def _config_from_args(args):
    overrides = {k: getattr(args, k) for k in DEFAULTS
                 if getattr(args, k, None) is not None}
    return RunConfig.load(getattr(args, "config", None), overrides)


def _prepare_run_dir(cfg):
    run_dir = cfg.run_dir()
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, "config.json"), "w") as fh:
        fh.write(cfg.to_json())
    return run_dir


def _write(path, text):
    with open(path, "w") as fh:
        fh.write(text)


# ---------------------------------------------------------------------------
# simulate

def cmd_simulate(args):
    cfg = _config_from_args(args)
    run_dir = _prepare_run_dir(cfg)
    out = os.path.join(run_dir, "datasets")
    os.makedirs(out, exist_ok=True)
    n_sensors = cfg.n_boards * cfg.skins_per_board
    manifest = {"config_hash": cfg.hash(), "files": []}
    if n_sensors == 1:
        sensor = fieldsim.make_sensor(
            fieldsim.BoardGeometry(), fieldsim.VariationParams(),
            seed=cfg.seed,
            drift_params=fieldsim.DriftParams(seed=cfg.seed,
                                              enabled=cfg.drift_enabled),
            sensor_id="s0")
        ds = datagen.snake_grid_protocol(sensor, passes=cfg.passes)
        path = os.path.join(out, "s0.mskd")
        datagen.save_dataset(ds, path)
        fieldsim.save_sensor(sensor, os.path.join(out, "s0.msks"))
        manifest["files"].append({"sensor": "s0", "dataset": "s0.mskd",
                                  "snapshot": "s0.msks", "n_samples": len(ds.records)})
    else:
        fleet = adapt_mod.make_fleet(
            n_boards=cfg.n_boards, skins_per_board=cfg.skins_per_board,
            seed=cfg.seed, passes=cfg.passes,
            board_standoff_sd=cfg.board_standoff_sd,
            board_position_sd=cfg.board_position_sd,
            drift_enabled=cfg.drift_enabled)
        for sid in fleet.data.sensor_ids:
            ds = fleet.data.datasets[sid]
            datagen.save_dataset(ds, os.path.join(out, f"{sid}.mskd"))
            fieldsim.save_sensor(fleet.sensors[sid],
                                 os.path.join(out, f"{sid}.msks"))
            manifest["files"].append(
                {"sensor": sid, "dataset": f"{sid}.mskd",
                 "snapshot": f"{sid}.msks", "n_samples": len(ds.records)})
    _write(os.path.join(out, "manifest.json"),
           json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(manifest['files'])} dataset(s) under {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train / adapt / eval

def _load_datasets(spec):
    """Dataset files from a path, directory or glob, sorted by name."""
    if os.path.isdir(spec):
        paths = sorted(globmod.glob(os.path.join(spec, "*.mskd")))
    elif os.path.exists(spec):
        paths = [spec]
    else:
        paths = sorted(globmod.glob(spec))
    if not paths:
        raise FileNotFoundError(f"no dataset files match {spec!r}")
    return paths, [datagen.load_dataset(p) for p in paths]


def cmd_train(args):
    cfg = _config_from_args(args)
    run_dir = _prepare_run_dir(cfg)
    paths, datasets = _load_datasets(args.data)
    tc = cfg.train_config()
    log = []
    if len(datasets) == 1:
        ds = datasets[0]
        dims = neural.DEFAULT_DIMS[:-1] + (cfg.out_dim,)
        model = neural.MlpModel(dims=dims, seed=cfg.seed,
                                relu_all=cfg.relu_all)
        neural.train(model, ds.flux, ds.labels(cfg.out_dim), tc,
                     locations=ds.locations if tc.triplet_weight > 0 else None,
                     log=log)
    else:
        merged = datagen.concat_datasets(datasets)
        ids = merged.sensor_ids
        msd = adapt_mod.MultiSensorDataset(
            datasets={sid: merged.subset(merged.records["sensor_idx"] == i)
                      for i, sid in enumerate(ids)},
            folds={})
        model = adapt_mod.train_multisensor(
            msd, tc, use_triplet=tc.triplet_weight > 0, model_seed=cfg.seed)
    ckpt = os.path.join(run_dir, "model.mskm")
    neural.save_model(model, ckpt)
    if log:
        _write(os.path.join(run_dir, "training_log.csv"),
               neural.training_log_csv(log))
    print(f"trained on {len(datasets)} dataset(s); checkpoint {ckpt}")
    return EXIT_OK


def cmd_adapt(args):
    cfg = _config_from_args(args)
    run_dir = _prepare_run_dir(cfg)
    model = neural.load_model(args.model)
    _, datasets = _load_datasets(args.source)
    merged = datagen.concat_datasets(datasets)
    sensor_idx = merged.records["sensor_idx"].astype(int)
    source = (merged.flux, merged.labels(model.out_dim), merged.locations,
              sensor_idx)
    target = fieldsim.load_sensor(args.target_sensor)
    aset = adapt_mod.collect_adaptation_set(target, cfg.budget, seed=cfg.seed,
                                            manual=args.manual)
    adapted = adapt_mod.self_supervised_adapt(model, aset, source,
                                              cfg.train_config(),
                                              seed=cfg.seed)
    ckpt = os.path.join(run_dir, "adapted_model.mskm")
    neural.save_model(adapted, ckpt)
    print(f"adapted with budget {cfg.budget}; checkpoint {ckpt}")
    return EXIT_OK


def _emit_reports(run_dir, reports, drift_result=None, sweep_xlabel="budget"):
    _write(os.path.join(run_dir, "report.json"),
           metrics.render_report(reports, "json"))
    _write(os.path.join(run_dir, "report.csv"),
           metrics.render_report(reports, "csv"))
    _write(os.path.join(run_dir, "report.md"),
           metrics.render_report(reports, "markdown"))
    figures.render_all(run_dir, reports=reports, drift_result=drift_result,
                       sweep_xlabel=sweep_xlabel)
    print(metrics.render_report(reports, "markdown"))


def _preset_table2(cfg, run_dir):
    fleet = adapt_mod.make_fleet(
        n_boards=cfg.n_boards, skins_per_board=cfg.skins_per_board,
        seed=cfg.seed, passes=cfg.passes,
        board_standoff_sd=cfg.board_standoff_sd,
        board_position_sd=cfg.board_position_sd,
        drift_enabled=cfg.drift_enabled)
    reports = adapt_mod.cross_validate(fleet, cfg.train_config(),
                                       budget=cfg.budget, n_jobs=cfg.jobs,
                                       config_hash=cfg.hash())
    _emit_reports(run_dir, reports)


def _preset_budget_sweep(cfg, run_dir):
    fleet = adapt_mod.make_fleet(n_boards=cfg.n_boards,
                                 skins_per_board=cfg.skins_per_board,
                                 seed=cfg.seed, passes=cfg.passes)
    reports = adapt_mod.budget_sweep(fleet, cfg.train_config(),
                                     config_hash=cfg.hash())
    _emit_reports(run_dir, reports,
                  sweep_xlabel="adaptation budget, indentations")


def _preset_sensor_sweep(cfg, run_dir):
    fleet = adapt_mod.make_fleet(n_boards=cfg.n_boards,
                                 skins_per_board=cfg.skins_per_board,
                                 seed=cfg.seed, passes=cfg.passes)
    reports = adapt_mod.sensor_count_sweep(fleet, cfg.train_config(),
                                           config_hash=cfg.hash())
    _emit_reports(run_dir, reports, sweep_xlabel="training sensors")


def _preset_flex_transfer(cfg, run_dir):
    fleet = adapt_mod.make_fleet(n_boards=cfg.n_boards,
                                 skins_per_board=cfg.skins_per_board,
                                 seed=cfg.seed, passes=cfg.passes)
    reports = adapt_mod.flex_transfer(fleet, cfg.train_config(),
                                      budget=cfg.budget, passes=cfg.passes,
                                      config_hash=cfg.hash())
    _emit_reports(run_dir, reports)


def _preset_manual_adapt(cfg, run_dir):
    """Adaptation with imprecise, hand-placed line indentations."""
    fleet = adapt_mod.make_fleet(n_boards=cfg.n_boards,
                                 skins_per_board=cfg.skins_per_board,
                                 seed=cfg.seed, passes=cfg.passes)
    data = fleet.data
    train_ids = data.train_ids(0)
    test_ids = data.test_ids(0)
    tc = cfg.train_config()
    model = adapt_mod.train_multisensor(data, tc, use_triplet=True,
                                        train_ids=train_ids)
    source = data.pooled(train_ids)
    rows = {"unadapted": [], "adapted, precise placement": [],
            "adapted, manual placement": []}
    for sid in test_ids:
        ds = data.datasets[sid]
        rows["unadapted"].append(metrics.evaluate_model(model, ds))
        for name, manual in (("adapted, precise placement", False),
                             ("adapted, manual placement", True)):
            aset = adapt_mod.collect_adaptation_set(
                fleet.sensors[sid], cfg.budget, seed=cfg.seed, manual=manual)
            m = adapt_mod.self_supervised_adapt(model, aset, source, tc,
                                                seed=cfg.seed)
            rows[name].append(metrics.evaluate_model(m, ds))
    reports = [metrics.EvalReport.from_folds(name, ms, config_hash=cfg.hash())
               for name, ms in rows.items()]
    _emit_reports(run_dir, reports)


def _preset_drift(cfg, run_dir):
    sensor = fieldsim.make_sensor(
        fieldsim.BoardGeometry(), fieldsim.VariationParams(), seed=cfg.seed,
        drift_params=fieldsim.DriftParams(seed=cfg.seed, enabled=True),
        sensor_id="drift-study")
    result = drift.drift_study(sensor, cfg.drift_spec(), cfg.train_config())
    _write(os.path.join(run_dir, "drift_curves.csv"),
           drift.curves_csv(result))
    _write(os.path.join(run_dir, "force_scatter.csv"),
           drift.force_scatter_csv(result))
    reports = [metrics.EvalReport.from_folds(
        f"baseline mode {mode}",
        [(c.accuracy[w], c.mse_xy[w], c.mse_f[w], cfg.eval_window)
         for w in range(len(c.window_starts))],
        config_hash=cfg.hash())
        for mode, c in result.curves.items()]
    _emit_reports(run_dir, reports, drift_result=result)


PRESETS = {
    "table2": (_preset_table2,
               "6-fold cross-sensor comparison: single / multi / "
               "multi+triplet / adapted"),
    "fig5a_budget_sweep": (_preset_budget_sweep,
                           "held-out accuracy vs adaptation budget"),
    "fig5b_sensor_sweep": (_preset_sensor_sweep,
                           "held-out accuracy vs training-sensor count"),
    "flex_transfer": (_preset_flex_transfer,
                      "adapt to a board with 80% smaller standoff"),
    "manual_adapt": (_preset_manual_adapt,
                     "adaptation with imprecise manual line placement"),
    "drift": (_preset_drift,
              "50K-interaction drift study across baseline policies"),
}


def cmd_eval(args):
    cfg = _config_from_args(args)
    run_dir = _prepare_run_dir(cfg)
    if args.model or args.data:
        if not (args.model and args.data):
            raise ConfigError("eval needs either --preset or both "
                              "--model and --data")
        model = neural.load_model(args.model)
        _, datasets = _load_datasets(args.data)
        reports = []
        for ds in datasets:
            if ds.flux.shape[1] != model.dims[0]:
                raise ConfigError(
                    f"dataset flux dimension {ds.flux.shape[1]} does not "
                    f"match model input dimension {model.dims[0]}")
            name = (ds.sensor_ids[0] if ds.sensor_ids else "dataset")
            reports.append(metrics.EvalReport.from_folds(
                name, [metrics.evaluate_model(model, ds, cfg.tolerance)],
                config_hash=cfg.hash()))
        _emit_reports(run_dir, reports)
        return EXIT_OK
    preset = cfg.preset
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; "
                          f"choose from {sorted(PRESETS)}")
    PRESETS[preset][0](cfg, run_dir)
    print(f"run directory: {run_dir}")
    return EXIT_OK


def cmd_presets(args):
    for name, (_, desc) in PRESETS.items():
        print(f"{name:22s} {desc}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# stream

def cmd_stream(args):
    cfg = _config_from_args(args)
    if args.mode == "record":
        sensor = (fieldsim.load_sensor(args.sensor) if args.sensor
                  else fieldsim.make_sensor(
                      fieldsim.BoardGeometry(), fieldsim.VariationParams(),
                      seed=cfg.seed,
                      drift_params=fieldsim.DriftParams(seed=cfg.seed),
                      sensor_id="stream"))
        rng = np.random.default_rng([sensor.seed, 400])
        blob = bytearray()
        for i in range(args.frames):
            flux, temps = fieldsim.read_flux(sensor, rng=rng)
            frame = protocol.FluxFrame.from_reading(i * FRAME_PERIOD_US,
                                                    flux, temps)
            blob += protocol.encode_frame(frame)
        with open(args.out, "wb") as fh:
            fh.write(blob)
        print(f"recorded {args.frames} frames to {args.out}")
        return EXIT_OK

    with open(args.infile, "rb") as fh:
        data = fh.read()
    frames, diag = protocol.decode_stream(data)
    if args.mode == "decode":
        sys.stdout.write(protocol.frames_to_csv(frames))
        print(f"decoded {diag.frames_decoded} frames, "
              f"{diag.crc_failures} CRC failures, "
              f"{diag.bytes_skipped} bytes skipped", file=sys.stderr)
        return EXIT_OK

    # replay: honor recorded timestamps, optionally rate-limited
    sys.stdout.write(protocol.CSV_HEADER + "\n")
    prev_ts = None
    for f in frames:
        if prev_ts is not None:
            dt = (f.timestamp_us - prev_ts) / 1e6
            if args.rate:
                dt = max(dt, 1.0 / args.rate)
            if dt > 0:
                time.sleep(dt)
        prev_ts = f.timestamp_us
        sys.stdout.write(protocol.frames_to_csv([f]).split("\n", 1)[1])
        sys.stdout.flush()
    print(f"replayed {len(frames)} frames", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="magskin",
        description="Magnetic skin simulator, decoder training and "
                    "evaluation harness.",
        epilog=f"Default output root: $" + OUTPUT_ROOT_ENV + " or ./runs; "
               "outputs go to <root>/<config-hash>/.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text, config_flags=True):
        sp = sub.add_parser(name, help=help_text,
                            formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        sp.set_defaults(func=func)
        if config_flags:
            sp.add_argument("--config", help="JSON config file")
            _add_config_flags(sp)
        return sp

    add("simulate", cmd_simulate, "generate datasets and sensor snapshots")

    sp = add("train", cmd_train, "train a decoder on dataset files")
    sp.add_argument("--data", required=True,
                    help="dataset file, directory or glob")

    sp = add("adapt", cmd_adapt, "self-supervised adaptation to a new sensor")
    sp.add_argument("--model", required=True, help="checkpoint to adapt")
    sp.add_argument("--source", required=True,
                    help="labeled source dataset file, directory or glob")
    sp.add_argument("--target-sensor", required=True,
                    help="target sensor snapshot (.msks)")
    sp.add_argument("--manual", action="store_true",
                    help="simulate imprecise manual line placement")

    sp = add("eval", cmd_eval, "run an experiment preset or score a model")
    sp.add_argument("--model", help="checkpoint to evaluate")
    sp.add_argument("--data", help="dataset file, directory or glob")

    sp = add("stream", cmd_stream, "wire-format record / replay / decode")
    sp.add_argument("--mode", required=True,
                    choices=("record", "replay", "decode"))
    sp.add_argument("--in", dest="infile", help="input wire-format file")
    sp.add_argument("--out", help="output file (record mode)")
    sp.add_argument("--sensor", help="sensor snapshot for record mode")
    sp.add_argument("--frames", type=int, default=1000,
                    help="frame count for record mode")
    sp.add_argument("--rate", type=float, default=None,
                    help="rate limit in Hz for replay mode")

    add("presets", cmd_presets, "list experiment presets", config_flags=False)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except neural.NonFiniteLossError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
