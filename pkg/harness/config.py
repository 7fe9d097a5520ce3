# harness/config.py

import copy
import json
import os

import jsonschema

from tools.errors import ConfigError
from tools.utils import log

ESTIMATOR_NAMES = (
    "lstd_q", "linear_dbrm", "linear_fqe", "kiv",
    "dbrm", "fqe", "deep_iv", "dfiv",
    "deepgmm", "agmm", "asem",
)

CONFIG_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "additionalProperties": False,
    "required": ["estimator"],
    "properties": {
        "env": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_states": {"type": "integer", "minimum": 2},
                "p_advance": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "discount": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "p_random": {"type": "number", "minimum": 0, "maximum": 1},
            },
        },
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_transitions": {"type": "integer", "minimum": 2},
                "alpha": {"type": ["number", "null"]},
                "split_ratio": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            },
        },
        "estimator": {
            "type": "object",
            "additionalProperties": False,
            "required": ["name"],
            "properties": {
                "name": {"type": "string", "enum": list(ESTIMATOR_NAMES)},
                "params": {"type": "object"},
            },
        },
        "seed": {"type": "integer", "minimum": 0},
        "n_seeds": {"type": "integer", "minimum": 1},
        "step_scale": {"type": "number", "exclusiveMinimum": 0},
        "n_workers": {"type": "integer", "minimum": 1},
        "output": {"type": "string", "minLength": 1},
    },
}

DEFAULTS = {
    "env": {"n_states": 100, "p_advance": 0.5, "discount": 0.99, "p_random": 0.0},
    "dataset": {"n_transitions": 100_000, "alpha": None, "split_ratio": 0.9},
    "estimator": {"params": {}},
    "seed": 0,
    "n_seeds": 5,
    "step_scale": 1.0,
    "n_workers": 1,
    "output": "results",
}


def validate_config(config: dict) -> None:
    validator = jsonschema.Draft7Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(config), key=lambda e: list(e.absolute_path))
    if errors:
        first = errors[0]
        where = "/".join(str(p) for p in first.absolute_path) or "<root>"
        raise ConfigError(
            f"invalid config at {where}: {first.message}",
            path=where,
            n_errors=len(errors),
        )


def with_defaults(config: dict) -> dict:
    """Validated copy of `config` with every optional field filled in."""
    validate_config(config)
    out = copy.deepcopy(DEFAULTS)
    for key, value in config.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key].update(copy.deepcopy(value))
        else:
            out[key] = copy.deepcopy(value)
    out["estimator"].setdefault("params", {})
    return out


def apply_env_overrides(config: dict) -> dict:
    """IVOPE_STEP_SCALE multiplies the configured step_scale."""
    env_scale = os.environ.get("IVOPE_STEP_SCALE")
    if not env_scale:
        return config
    try:
        scale = float(env_scale)
    except ValueError:
        raise ConfigError(f"IVOPE_STEP_SCALE must be a number, got {env_scale!r}")
    if scale <= 0:
        raise ConfigError("IVOPE_STEP_SCALE must be positive")
    out = copy.deepcopy(config)
    out["step_scale"] = float(out["step_scale"]) * scale
    return out


def load_config(path: str) -> dict:
    if not os.path.exists(path):
        raise FileNotFoundError(f"Config file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}", line=e.lineno)
    config = apply_env_overrides(with_defaults(raw))
    log(f"Loaded config {path} (estimator={config['estimator']['name']}, n_seeds={config['n_seeds']})")
    return config


def save_config(config: dict, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(config, f, indent=2, sort_keys=True)
