"""JSON study configuration: parsing, validation, serialisation.

A config file is one JSON object whose keys are :class:`StudyConfig`
fields. Omitted keys take their defaults; unknown keys are an error.

    {
      "study": 1,                    # 1 (no DIF, 8 cells) or 2 (DIF, 32 cells)
      "n_replications": 100,
      "n_examinees": 5000,
      "estimators": ["MLE", "EAP"],  # provisional estimator during the CAT
      "test_lengths": [25, 35],
      "exposure_rates": [0.20, 0.33],
      "dif_parameters": ["a", "b"],  # study 2 only
      "dif_proportions": [0.2, 0.4], # study 2 only
      "dif_magnitude": 0.4,
      "redraw_dif": true,            # new contaminated subset every replication
      "alpha": 0.05,
      "models": ["M6", "S1", "S2", "S3"],
      "base_seed": 0,
      "min_item_replications": 10,
      "pool_size": 800,
      "D": 1.0,
      "icc_screen": true
    }
"""
from __future__ import annotations

import dataclasses
import json

from .harness import StudyConfig, config_dict


class ConfigError(ValueError):
    """Malformed or invalid configuration."""


_FIELDS = {f.name: f for f in dataclasses.fields(StudyConfig)}
_DEFAULTS = StudyConfig()


def _check_type(key, value):
    default = getattr(_DEFAULTS, key)
    if isinstance(default, bool):
        ok = isinstance(value, bool)
        want = "a boolean"
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
        want = "an integer"
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        want = "a number"
    elif isinstance(default, tuple):
        ok = isinstance(value, list) and all(
            isinstance(v, type(default[0])) or (isinstance(default[0], float) and isinstance(v, int))
            for v in value if not isinstance(v, bool)) and not any(isinstance(v, bool) for v in value)
        want = f"a list of {type(default[0]).__name__}"
    else:
        ok, want = True, ""
    if not ok:
        raise ConfigError(f"key {key!r}: expected {want}, got {json.dumps(value)}")


def config_from_dict(data) -> StudyConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(data) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown keys: {', '.join(unknown)}")
    if "study" not in data:
        raise ConfigError("missing required key 'study'")
    for k, v in data.items():
        _check_type(k, v)
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    for k in ("dif_magnitude", "alpha", "D"):
        if k in kwargs:
            kwargs[k] = float(kwargs[k])
    for k in ("exposure_rates", "dif_proportions"):
        if k in kwargs:
            kwargs[k] = tuple(float(x) for x in kwargs[k])
    try:
        return StudyConfig(**kwargs)
    except ValueError as err:
        raise ConfigError(str(err)) from None


def parse_config(path) -> StudyConfig:
    """Read and validate a JSON study config; raises :class:`ConfigError`."""
    with open(path) as fh:
        text = fh.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as err:
        line = text.splitlines()[err.lineno - 1] if err.lineno - 1 < len(text.splitlines()) else ""
        raise ConfigError(f"{path}:{err.lineno}:{err.colno}: {err.msg}\n    {line}") from None
    return config_from_dict(data)


def dump_config(cfg: StudyConfig) -> str:
    return json.dumps(config_dict(cfg), indent=2, sort_keys=True) + "\n"
