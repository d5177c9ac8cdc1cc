"""Run configuration: dataclass defaults, config-file parsing, overrides.

Config files are UTF-8 ``key = value`` text ('#' starts a comment).  Keys are
exactly the RunConfig field names; unknown keys are hard errors.  Every key
can also be set by a CLI flag of the same name (dashes for underscores), and
a flag given on the command line beats the file value.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass


class ConfigError(ValueError):
    """Unknown key or unparsable value in a config source."""


@dataclass
class RunConfig:
    """Defaults reproduce the composite-digit benchmark settings."""

    data: str = "."             # dir with MNIST IDX files or *.mm36 caches
    out: str = "run"            # output directory for metrics/checkpoints
    seed: int = 0
    epochs: int = 100
    batch_size: int = 64
    optimizer: str = "adam"     # adam | sgd
    lr: float = 5e-4
    gamma: float = 0.95         # per-epoch exponential lr decay
    mode: str = "multi_task"    # single_task | multi_task | fa | dfa | kolen_pollack
    repetitions: int = 1
    eval_every: int = 5         # test metrics cadence, in epochs
    n_train: int = 50_000
    n_test: int = 10_000
    channels: int = 64
    hidden: int = 50
    task: int = 0               # label column for the single-task modes
    kp_lambda: float = 0.5      # weight decay toward symmetry (kolen_pollack)
    steps: int = 1000           # alignment-check step count
    dtype: str = "float64"      # float64 | float32

    def __post_init__(self):
        if self.mode not in ("single_task", "multi_task", "fa", "dfa", "kolen_pollack"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"unknown dtype {self.dtype!r}")
        if self.batch_size < 1 or self.epochs < 0 or self.eval_every < 1:
            raise ConfigError("batch_size/eval_every must be >= 1 and epochs >= 0")


FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}
_PARSERS = {"int": int, "float": float, "str": str}


def parse_config_file(path) -> dict:
    """Read key = value lines into a typed dict; unknown keys raise."""
    values: dict = {}
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
            key, _, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if key not in FIELD_TYPES:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            try:
                values[key] = _PARSERS[FIELD_TYPES[key]](val)
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    return values


def make_config(file_values: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Merge (defaults <- config file <- explicit overrides) into a RunConfig."""
    merged: dict = {}
    for source in (file_values or {}, overrides or {}):
        for key, val in source.items():
            if val is None:
                continue
            if key not in FIELD_TYPES:
                raise ConfigError(f"unknown config key {key!r}")
            merged[key] = val
    return RunConfig(**merged)
