"""Experiment configuration: JSON schema validation, defaults, dotted overrides."""
from __future__ import annotations

import copy
import json
from importlib import resources
from pathlib import Path

import jsonschema

from .errors import ConfigError
from .models import ModelSpec
from .train import TrainConfig

DATA_DEFAULTS = {
    "generator": "two-pattern",
    "seed": 0,
    "split_seed": 0,
    "fraction": 1.0,
    "cardinalities": [3, 5, 8, 40, 60, 80, 100, 120],
    "n_rows": 60000,
    "hidden_dim": 16,
    "w1": 2.0,
    "w2": 2.0,
    "noise": 0.1,
    "pairs_per_pattern": None,
    "d3": 3,
    "path": None,
    "val_path": None,
    "test_path": None,
}

ANALYSIS_DEFAULTS = {
    "split_groups": 2,
    "include_diagonal": True,
    "grid_layer": 0,
    "checkpoint": True,
    "trajectory_csv": True,
}


def load_schema():
    text = resources.files("collapse_lab").joinpath("config_schema.json").read_text()
    return json.loads(text)


def _defaults():
    model = ModelSpec().to_json()
    train = {k: v for k, v in TrainConfig().__dict__.items() if k != "seed"}
    return {
        "data": dict(DATA_DEFAULTS),
        "model": model,
        "train": train,
        "analysis": dict(ANALYSIS_DEFAULTS),
        "output_dir": "runs/experiment",
        "seed": 0,
    }


def resolve(raw):
    """Validate ``raw`` against the schema and fill every default."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    try:
        jsonschema.validate(raw, load_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {exc.message}") from None
    cfg = _defaults()
    for key, val in raw.items():
        if isinstance(val, dict):
            cfg[key].update(copy.deepcopy(val))
        else:
            cfg[key] = val
    # semantic checks shared with the library objects
    model_spec(cfg).validate()
    train_config(cfg).validate()
    gen = cfg["data"]["generator"]
    if gen == "csv" and not cfg["data"]["path"]:
        raise ConfigError("config error at data/path: csv generator needs a path")
    return cfg


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from None
    cfg = resolve(raw)
    base = path.resolve().parent
    for key in ("path", "val_path", "test_path"):
        p = cfg["data"].get(key)
        if p and not Path(p).is_absolute():
            cfg["data"][key] = str(base / p)
    return cfg


def model_spec(cfg):
    m = dict(cfg["model"])
    m["mlp"] = tuple(m["mlp"])
    return ModelSpec(**m)


def train_config(cfg):
    return TrainConfig(seed=cfg["seed"], **cfg["train"])


def get_path(cfg, dotted):
    node = cfg
    for part in dotted.split("."):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[part]
    return node


def set_path(cfg, dotted, value):
    parts = dotted.split(".")
    node = cfg
    for part in parts[:-1]:
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[part]
    if not isinstance(node, dict) or parts[-1] not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    node[parts[-1]] = value
