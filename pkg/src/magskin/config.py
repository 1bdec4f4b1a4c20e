"""Run configuration: defaults, JSON loading, flag overrides, hashing.

One flat key set covers every subcommand; unknown keys are rejected by
name so a typo fails loudly instead of silently using a default.  The
config hash is a sha256 over the canonical (sorted-key) JSON form, so
it is stable across key ordering and whitespace.  Keys that cannot
change results (output directory, job count) are excluded from the
hash, which names the run directory.
"""

from __future__ import annotations

import hashlib
import json
import os


class ConfigError(ValueError):
    """Invalid configuration; maps to CLI exit code 2."""


DEFAULTS = {
    "preset": "table2",
    "output_dir": "",
    "jobs": 1,
    "seed": 0,
    # fleet simulation
    "n_boards": 6,
    "skins_per_board": 3,
    "passes": 6,
    "drift_enabled": False,
    "board_standoff_sd": 0.15,
    "board_position_sd": 0.15,
    # training
    "learning_rate": 1e-3,
    "batch_size": 256,
    "epochs": 40,
    "triplet_weight": 0.0,
    "val_fraction": 0.0,
    "relu_all": False,
    "loc_weight": 1.0,
    "force_weight": 1.0,
    "out_dim": 3,
    # adaptation
    "budget": 390,
    "adapt_lr": 5e-4,
    "adapt_epochs": 50,
    "adapt_triplet_weight": 30.0,
    "freeze_head": False,
    # evaluation
    "tolerance": 1.0,
    # drift study
    "total_interactions": 50_000,
    "train_prefix": 5_000,
    "eval_window": 1_000,
    "eval_stride": 5_000,
    "baseline_k": 100,
}

_UNHASHED = {"output_dir", "jobs"}

OUTPUT_ROOT_ENV = "MAGSKIN_OUT"


class RunConfig:
    """Validated union of all module settings; every key has a default."""

    def __init__(self, values=None):
        merged = dict(DEFAULTS)
        for key, value in (values or {}).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            expected = type(DEFAULTS[key])
            if expected is float and isinstance(value, int):
                value = float(value)
            if not isinstance(value, expected):
                raise ConfigError(
                    f"config key {key!r} expects {expected.__name__}, "
                    f"got {type(value).__name__}")
            merged[key] = value
        self.values = merged

    def __getattr__(self, name):
        try:
            return self.__dict__["values"][name]
        except KeyError:
            raise AttributeError(name)

    @classmethod
    def load(cls, path=None, overrides=None):
        """Config file plus overrides; override values win."""
        values = {}
        if path:
            try:
                with open(path) as fh:
                    loaded = json.load(fh)
            except OSError as exc:
                raise ConfigError(f"cannot read config file: {exc}")
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file is not valid JSON: {exc}")
            if not isinstance(loaded, dict):
                raise ConfigError("config file must hold a JSON object")
            values.update(loaded)
        values.update(overrides or {})
        return cls(values)

    def hash(self):
        hashed = {k: v for k, v in self.values.items() if k not in _UNHASHED}
        canon = json.dumps(hashed, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:12]

    def output_root(self):
        return (self.output_dir or os.environ.get(OUTPUT_ROOT_ENV)
                or os.path.join(os.getcwd(), "runs"))

    def run_dir(self):
        """Per-run output directory, named by the config hash."""
        return os.path.join(self.output_root(), self.hash())

    def train_config(self):
        from . import neural
        return neural.TrainConfig(
            learning_rate=self.learning_rate, batch_size=self.batch_size,
            epochs=self.epochs, seed=self.seed,
            triplet_weight=self.triplet_weight,
            val_fraction=self.val_fraction, relu_all=self.relu_all,
            loc_weight=self.loc_weight, force_weight=self.force_weight,
            adapt_lr=self.adapt_lr, adapt_epochs=self.adapt_epochs,
            adapt_triplet_weight=self.adapt_triplet_weight,
            freeze_head=self.freeze_head)

    def drift_spec(self):
        from . import drift
        return drift.DriftStudySpec(
            total_interactions=self.total_interactions,
            train_prefix=self.train_prefix, eval_window=self.eval_window,
            eval_stride=self.eval_stride, baseline_k=self.baseline_k)

    def to_json(self):
        return json.dumps(self.values, indent=2, sort_keys=True) + "\n"
