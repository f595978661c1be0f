"""Versioned experiment configuration with schema validation and default filling."""

from __future__ import annotations

import copy
import hashlib
import json
import math
from pathlib import Path

import jsonschema

from .core import ConfigurationError

SCHEMA_VERSION = 1

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_INT1 = {"type": "integer", "minimum": 1}
_PAIR = {"type": "array", "items": _NUM, "minItems": 1}


def _obj(props: dict) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False}


SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "qcbf experiment",
    "type": "object",
    "required": ["schema"],
    "additionalProperties": False,
    "properties": {
        "schema": {"const": SCHEMA_VERSION},
        "system": _obj({
            "name": {"enum": ["pendulum"]},
            "dt": _POS,
            "substeps": _INT1,
            "theta_failure": _POS,
            "control_bound": _POS,
            "dstb_bound": {"type": "number", "minimum": 0},
        }),
        "grid": _obj({
            "min": _PAIR,
            "max": _PAIR,
            "count": {"type": "array", "items": {"type": "integer", "minimum": 2}, "minItems": 1},
        }),
        "solve": _obj({
            "mode": {"enum": ["undiscounted", "discounted"]},
            "gamma_env": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            "tolerance": _POS,
            "max_iterations": _INT1,
            "control_points": _INT1,
            "dstb_points": _INT1,
        }),
        "filter": _obj({
            "kinds": {"type": "array", "minItems": 1,
                      "items": {"enum": ["qcbf", "lrsf", "ct-ana", "ct-heu", "none"]}},
            "beta": _obj({
                "kind": {"enum": ["linear", "induced"]},
                "gamma": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "rate": _POS,
                "dt": _POS,
                "substeps": {"type": "integer", "minimum": 20},
            }),
            "ct_alpha_rate": _POS,
            "pd_gains": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2},
            "value_field": {"type": ["string", "null"]},
            "lift_field": {"type": ["string", "null"]},
        }),
        "train": _obj({
            "gamma_init": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            "gamma_final": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            "gamma_anneal_steps": {"type": ["integer", "null"], "minimum": 0},
            "lr_critic": {"type": "number", "minimum": 0},
            "lr_ctrl": {"type": "number", "minimum": 0},
            "lr_dstb": {"type": "number", "minimum": 0},
            "timescale_ratio": {"type": "number", "exclusiveMinimum": 1},
            "tau": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            "noise_scale": {"type": "number", "minimum": 0},
            "batch_size": _INT1,
            "buffer_capacity": _INT1,
            "total_steps": {"type": "integer", "minimum": 0},
            "eval_interval": _INT1,
            "warmup_steps": {"type": "integer", "minimum": 0},
            "episode_horizon": _INT1,
            "hidden": {"type": "array", "items": _INT1, "minItems": 1},
            "reset_low": _PAIR,
            "reset_high": _PAIR,
            "target_smoothing": {"type": "boolean"},
            "eval_episodes": _INT1,
            "runs": _INT1,
        }),
        "best_response": _obj({
            "steps": _INT1,
            "batch_size": _INT1,
            "lr": _POS,
            "noise_scale": {"type": "number", "minimum": 0},
            "episode_horizon": _INT1,
            "buffer_capacity": _INT1,
            "warmup_steps": {"type": "integer", "minimum": 0},
            "hidden": {"type": "array", "items": _INT1, "minItems": 1},
        }),
        "rollout": _obj({
            "n": _INT1,
            "band": {"type": ["number", "null"], "exclusiveMinimum": 0},
            "horizon": _INT1,
            "disturbance": {"type": "array", "minItems": 1, "items": {
                "enum": ["best-response-grid", "best-response-neural", "zero", "random"]}},
            "x0": {"type": ["array", "null"], "items": {"type": "array", "items": _NUM}},
            "dstb_checkpoint": {"type": ["string", "null"]},
        }),
        "seed": {"type": "integer", "minimum": 0},
        "output": {"type": "string"},
    },
}

DEFAULTS = {
    "schema": SCHEMA_VERSION,
    "system": {"name": "pendulum", "dt": 0.01, "substeps": 1, "theta_failure": math.pi / 3,
               "control_bound": 20.0, "dstb_bound": 2.0},
    "grid": {"min": [-1.2, -7.0], "max": [1.2, 7.0], "count": [161, 161]},
    "solve": {"mode": "undiscounted", "gamma_env": 0.9, "tolerance": 1e-6, "max_iterations": 2000,
              "control_points": 41, "dstb_points": 21},
    "filter": {"kinds": ["qcbf", "ct-ana", "ct-heu"],
               "beta": {"kind": "linear", "gamma": 0.9, "rate": 1.0, "dt": 0.01, "substeps": 20},
               "ct_alpha_rate": 1.0, "pd_gains": [32.0, 8.0], "value_field": None, "lift_field": None},
    "train": {"gamma_init": 0.85, "gamma_final": 0.9999, "gamma_anneal_steps": None, "lr_critic": 1e-3,
              "lr_ctrl": 1e-4, "lr_dstb": 4e-4, "tau": 0.005, "noise_scale": 0.3, "batch_size": 128,
              "buffer_capacity": 100_000, "total_steps": 200_000, "eval_interval": 20_000,
              "warmup_steps": 1_000, "episode_horizon": 200, "hidden": [64, 64],
              "reset_low": [-1.047, -7.0], "reset_high": [1.047, 7.0], "target_smoothing": False,
              "eval_episodes": 20, "runs": 3},
    "best_response": {"steps": 20_000, "batch_size": 128, "lr": 1e-3, "noise_scale": 0.3,
                      "episode_horizon": 200, "buffer_capacity": 50_000, "warmup_steps": 1_000,
                      "hidden": [64, 64]},
    "rollout": {"n": 20, "band": None, "horizon": 500, "disturbance": ["best-response-grid"], "x0": None,
                "dstb_checkpoint": None},
    "seed": 0,
    "output": "out",
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "x0":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _line_of(text: str, path) -> int | None:
    """Line of the last object key on ``path`` in the JSON source, scanning keys in order."""
    pos, found = 0, None
    for part in path:
        if not isinstance(part, str):
            continue
        i = text.find(f'"{part}"', pos)
        if i < 0:
            return found
        pos = i + len(part) + 2
        found = text.count("\n", 0, i) + 1
    return found


def validate(raw: dict, source: str | None = None) -> None:
    """Raise :class:`ConfigurationError` naming the offending location (and line, given the source)."""
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        line = _line_of(source, exc.absolute_path) if source else None
        at = f"line {line} ({where})" if line else where
        raise ConfigurationError(f"config error at {at}: {exc.message}") from None


def resolve(raw: dict, seed: int | None = None, source: str | None = None) -> dict:
    """Validate, fill defaults, apply a seed override and check cross-field constraints."""
    if not isinstance(raw, dict):
        raise ConfigurationError("config error at <root>: expected a JSON object")
    validate(raw, source)
    cfg = _merge(DEFAULTS, raw)
    if seed is not None:
        cfg["seed"] = int(seed)
    train = cfg["train"]
    if "timescale_ratio" in train:
        train["lr_dstb"] = train.pop("timescale_ratio") * train["lr_ctrl"]
    if not train["lr_dstb"] > train["lr_ctrl"]:
        raise ConfigurationError("config error at train: timescale ratio lr_dstb/lr_ctrl must exceed 1")
    g = cfg["grid"]
    if not len(g["min"]) == len(g["max"]) == len(g["count"]):
        raise ConfigurationError("config error at grid: min, max and count lengths differ")
    validate(cfg)
    return cfg


def load(path: str | Path, seed: int | None = None) -> dict:
    try:
        text = Path(path).read_text()
        raw = json.loads(text)
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config error at line {exc.lineno}: {exc.msg}") from None
    return resolve(raw, seed, text)


def canonical_json(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, indent=1)


def config_hash(cfg: dict) -> str:
    """SHA-256 of :func:`canonical_json`, so the digest can be checked against the resolved file."""
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()
