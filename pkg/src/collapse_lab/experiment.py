"""One experiment = resolved config -> dataset -> trained model -> reports."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import model_spec, train_config
from .data import SplitSpec, gen_toy, gen_two_pattern, load_csv, split, subsample
from .errors import ConfigError
from .fileio import atomic_write_json, atomic_write_text
from .models import Model
from .report import (EmbeddingView, collapse_report, save_model_checkpoint,
                     trajectory_csv, write_report_files)
from .train import train


def build_splits(cfg):
    d = cfg["data"]
    gen = d["generator"]
    if gen == "two-pattern":
        ds = gen_two_pattern(d["cardinalities"], n_rows=d["n_rows"], hidden_dim=d["hidden_dim"],
                             w1=d["w1"], w2=d["w2"], noise=d["noise"],
                             pairs_per_pattern=d["pairs_per_pattern"], seed=d["seed"])
    elif gen == "toy":
        ds = gen_toy(d["d3"], seed=d["seed"])
    elif gen == "csv":
        ds = load_csv(d["path"])
        if d["val_path"] or d["test_path"]:
            if not (d["val_path"] and d["test_path"]):
                raise ConfigError("csv data needs both val_path and test_path, or neither")
            tr = subsample(ds, d["fraction"], seed=d["split_seed"])
            return tr, load_csv(d["val_path"], vocab=ds.vocab), load_csv(d["test_path"], vocab=ds.vocab)
    else:
        raise ConfigError(f"unknown generator {gen!r}")
    tr, va, te = split(ds, SplitSpec(seed=d["split_seed"]))
    if d["fraction"] < 1.0:
        tr = subsample(tr, d["fraction"], seed=d["split_seed"])
    return tr, va, te


@dataclass
class ExperimentResult:
    record: object
    report: dict
    model: Model


def run_experiment(cfg, out_dir=None, splits=None):
    """Train per ``cfg``; when ``out_dir`` is given write the run record,
    checkpoint and collapse report there."""
    tr, va, te = splits or build_splits(cfg)
    spec = model_spec(cfg)
    tcfg = train_config(cfg)
    model = Model(tr.schema, spec, seed=cfg["seed"])
    record = train(model, tr, va, te, tcfg, config_echo=cfg)
    a = cfg["analysis"]
    view = EmbeddingView.from_model(model, layer=a["grid_layer"])
    report = collapse_report(view, split_groups=a["split_groups"],
                             include_diagonal=a["include_diagonal"],
                             trajectory=record.ia_trajectory)
    report["config"] = cfg
    report["seed"] = cfg["seed"]
    report["test_auc"] = record.test_auc
    if out_dir is not None:
        out = Path(out_dir)
        atomic_write_json(out / "run_record.json", record.to_json())
        write_report_files(report, out)
        atomic_write_json(out / "resolved_config.json", cfg)
        atomic_write_json(out / "schema.json", tr.schema.to_json())
        if a["trajectory_csv"]:
            atomic_write_text(out / "ia_trajectory.csv", trajectory_csv(record.ia_trajectory))
        if a["checkpoint"]:
            save_model_checkpoint(model, out / "checkpoint", layer=a["grid_layer"])
    return ExperimentResult(record, report, model)


def summary_ia(report):
    """Mean per-table IA and mean concatenated IA over fields."""
    per = np.asarray(report["ia_per_field"], dtype=np.float64)
    return float(per.mean()), float(np.mean(report["concatenated_ia"]))
