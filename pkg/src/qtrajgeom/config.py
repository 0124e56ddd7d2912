"""Experiment configuration: JSON documents validated against per-command schemas."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import jsonschema

from .errors import ConfigError

COMMANDS = ("simulate", "optimal", "transition", "chern", "corrections")

_tau = {"type": "number", "exclusiveMinimum": 0}
_tau_list = {"type": "array", "items": _tau, "minItems": 1}
_latitude = {"type": "number", "minimum": 0, "maximum": 3.141592653589793}
_pos_int = {"type": "integer", "minimum": 1}


def _schema(command: str, properties: dict) -> dict:
    props = {"command": {"const": command}, "seed": {"type": "integer", "minimum": 0},
             "T": {"type": "number", "exclusiveMinimum": 0}}
    props.update(properties)
    return {"type": "object", "properties": props, "additionalProperties": False}


SCHEMAS = {
    "simulate": _schema("simulate", {
        "Theta": _latitude,
        "taus": _tau_list,
        "N": {"type": "integer", "minimum": 2},
        "n_traj": _pos_int,
        "bin_width": {"type": "number", "exclusiveMinimum": 0},
        "init": {"oneOf": [
            {"const": "equilibrium"},
            {"type": "object", "properties": {"theta": _latitude, "phi": {"type": "number"}},
             "required": ["theta", "phi"], "additionalProperties": False}]},
        "variant": {"enum": ["gaussian", "null"]},
        "null_c": {"type": "number", "minimum": 0},
        "keep_paths": {"type": "boolean"},
        "n_boot": _pos_int,
    }),
    "optimal": _schema("optimal", {
        "taus": _tau_list,
        "Thetas": {"type": "array", "items": _latitude, "minItems": 1},
        "N": {"type": "integer", "minimum": 10},
        "scan_n_theta": {"type": "integer", "minimum": 2},
    }),
    "transition": _schema("transition", {
        "quantities": {"type": "array", "uniqueItems": True, "minItems": 1, "items": {"enum": [
            "tau_c_equator", "tau_c_open", "tau_c_equilibrium_open", "Theta_C", "tau_c_eff"]}},
        "open_n_theta": _pos_int,
        "open_N": _pos_int,
        "theta_c_taus": _tau_list,
        "theta_c_n_theta": _pos_int,
        "theta_c_N": _pos_int,
        "eff_n_scan": {"type": "integer", "minimum": 2},
    }),
    "chern": _schema("chern", {
        "taus": _tau_list,
        "init_rule": {"enum": ["on_axis", "equilibrium"]},
        "record_rule": {"oneOf": [{"enum": ["greedy", "fixed"]}, {"type": "number"}]},
        "n_theta": {"type": "integer", "minimum": 3},
        "N": {"type": "integer", "minimum": 2},
    }),
    "corrections": _schema("corrections", {
        "taus": _tau_list,
        "N": {"type": "integer", "minimum": 10},
        "empirical": {"type": "boolean"},
        "mc_N": {"type": "integer", "minimum": 2},
        "mc_n_traj": _pos_int,
        "bin_width": {"type": "number", "exclusiveMinimum": 0},
        "n_boot": _pos_int,
    }),
}

DEFAULTS = {
    "simulate": {"Theta": 1.5707963267948966, "taus": [0.1], "T": 1.0, "N": 100, "n_traj": 100,
                 "bin_width": 0.1, "init": "equilibrium", "variant": "gaussian", "null_c": 0.5,
                 "keep_paths": True, "n_boot": 1000, "seed": 0},
    "optimal": {"taus": [0.15], "Thetas": [1.5707963267948966], "N": 400, "scan_n_theta": 128,
                "T": 1.0, "seed": 0},
    "transition": {"quantities": ["tau_c_equator", "tau_c_open", "tau_c_equilibrium_open"],
                   "open_n_theta": 64, "open_N": 256, "theta_c_taus": [0.1, 0.15, 0.2],
                   "theta_c_n_theta": 128, "theta_c_N": 400, "eff_n_scan": 30, "T": 1.0,
                   "seed": 0},
    "chern": {"taus": [0.05, 0.2], "init_rule": "on_axis", "record_rule": "greedy",
              "n_theta": 128, "N": 256, "T": 1.0, "seed": 0},
    "corrections": {"taus": [0.1, 0.2], "N": 2000, "empirical": False, "mc_N": 100,
                    "mc_n_traj": 500, "bin_width": 0.1, "n_boot": 1000, "T": 1.0, "seed": 0},
}


def _parse_value(text: str):
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        return text
    # no field is nullable, while "null" is a valid variant name
    return text if value is None else value


def apply_overrides(cfg: dict, overrides) -> dict:
    """Apply ``key=value`` overrides; dotted keys reach into nested objects.

    Values are parsed as JSON when possible and kept as strings otherwise
    (including ``null``).
    """
    cfg = copy.deepcopy(cfg)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        node = cfg
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                node[part] = {}
            node = node[part]
        node[parts[-1]] = _parse_value(text)
    return cfg


def validate(command: str, cfg: dict) -> dict:
    """Validate against the command schema and fill in defaults."""
    if command not in SCHEMAS:
        raise ConfigError(f"unknown command {command!r}")
    try:
        jsonschema.validate(cfg, SCHEMAS[command])
    except jsonschema.ValidationError as exc:
        where = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from None
    full = copy.deepcopy(DEFAULTS[command])
    full.update(cfg)
    full["command"] = command
    return full


def load_config(command: str, path: str | Path | None, overrides=None) -> dict:
    if path is None:
        raw = {}
    else:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    return validate(command, apply_overrides(raw, overrides))


def config_hash(cfg: dict) -> str:
    """SHA-256 of the canonical JSON form of a resolved config."""
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()
