"""Sectioned key-value run configuration with strict validation: unknown
sections or keys are errors, listed all at once."""

from __future__ import annotations

import configparser
import hashlib
import json
from pathlib import Path

from .errors import ConfigError

# Defaults double as the schema; value types are inferred from them.
DEFAULTS: dict[str, dict] = {
    "run": {"seed": 0, "out": "runs/out"},
    "mesh": {"nx": 8, "ny": 8, "shape": "square", "levels": 3, "mu": 2.0, "kind": "P0"},
    "schedule": {"sigma_min": 1e-3, "sigma_max": 40.0, "rho": 7.0, "steps": 400},
    "covariance": {"length_scale": 0.1, "jitter": 1e-6},
    "model": {
        "hidden": 32,
        "convs_per_level": 2,
        "patch": 5,
        "time_dim": 16,
        "freq_scale": 10.0,
        "mixing": "dense",
    },
    "train": {"batch": 8, "iterations": 1000, "lr": 1e-3, "beta1": 0.9, "beta2": 0.999},
    "sample": {"count": 4},
    "guidance": {
        "zeta": 1.0,
        "precondition": True,
        "sigma_obs": 1e-3,
        "daps_levels": 50,
        "daps_steps": 20,
        "daps_eta": 1e-2,
    },
    "oracle": {"mean": 0.0, "scale": 1.0, "length_scale": 0.2},
    "data": {
        "count": 100,
        "split": 0.9,
        "max_inclusions": 3,
        "background": 1.0,
        "min_conductivity": 0.1,
        "a_min": 0.05,
        "a_max": 0.15,
        "kappa": 2.0,
    },
    "eval": {"mmd_length_scale": 10.0},
}

_SHAPES = ("square", "lshape", "plus", "hole")


def _convert(raw: str, default, where: str):
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError([f"{where}: expected boolean, got {raw!r}"])
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError([f"{where}: expected integer, got {raw!r}"]) from None
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError([f"{where}: expected number, got {raw!r}"]) from None
    return raw


class RunConfig:
    """Resolved configuration: defaults, overlaid file values, overlaid
    command-line overrides."""

    def __init__(self, values: dict[str, dict]):
        self.values = values

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    @classmethod
    def load(cls, path=None, overrides: dict | None = None) -> "RunConfig":
        values = {sec: dict(keys) for sec, keys in DEFAULTS.items()}
        problems: list[str] = []
        if path is not None:
            parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
            parser.optionxform = str
            read = parser.read(Path(path))
            if not read:
                raise ConfigError([f"config file not found: {path}"])
            for section in parser.sections():
                if section not in DEFAULTS:
                    problems.append(f"unknown section [{section}]")
                    continue
                for key, raw in parser[section].items():
                    if key not in DEFAULTS[section]:
                        problems.append(f"unknown key {section}.{key}")
                        continue
                    values[section][key] = _convert(
                        raw, DEFAULTS[section][key], f"{section}.{key}"
                    )
        if problems:
            raise ConfigError(problems)
        for section, keys in (overrides or {}).items():
            for key, val in keys.items():
                if val is not None:
                    values[section][key] = val
        cfg = cls(values)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        problems = []
        v = self.values
        if v["mesh"]["shape"] not in _SHAPES:
            problems.append(f"mesh.shape must be one of {_SHAPES}")
        if v["mesh"]["kind"] not in ("P0", "P1"):
            problems.append("mesh.kind must be P0 or P1")
        if v["mesh"]["levels"] < 1:
            problems.append("mesh.levels must be >= 1")
        if not 0 < v["schedule"]["sigma_min"] < v["schedule"]["sigma_max"]:
            problems.append("schedule needs 0 < sigma_min < sigma_max")
        if v["model"]["mixing"] not in ("dense", "vector"):
            problems.append("model.mixing must be dense or vector")
        if not 0 < v["data"]["split"] <= 1:
            problems.append("data.split must be in (0, 1]")
        if problems:
            raise ConfigError(problems)

    def hash(self) -> str:
        blob = json.dumps(self.values, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]
