"""``collapse-lab`` command line.

Exit codes: 0 success, 2 usage or configuration error, 3 training failure.
"""
from __future__ import annotations

import argparse
import copy
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import config as config_mod
from .data import gen_toy, gen_two_pattern, save_generated
from .errors import CollapseLabError, ConfigError, TrainingAborted
from .fileio import atomic_write_json, atomic_write_text, csv_text
from .models import FieldSchema
from .report import collapse_report, view_from_checkpoint, write_report_files
from .train import run_toy

log = logging.getLogger("collapse_lab")

EXIT_OK, EXIT_USAGE, EXIT_TRAIN = 0, 2, 3


class UsageError(CollapseLabError):
    pass


def _int_list(text):
    try:
        vals = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    return vals


def worker_count():
    raw = os.environ.get("COLLAPSE_LAB_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise UsageError(f"COLLAPSE_LAB_THREADS must be an integer, got {raw!r}") from None


# -- toy -------------------------------------------------------------------------

def cmd_toy(args):
    if not args.d3 or any(d < 1 for d in args.d3):
        raise UsageError("--d3 needs positive integers")
    if not args.seeds:
        raise UsageError("--seeds must not be empty")
    if args.steps < 1:
        raise UsageError("--steps must be >= 1")
    out = Path(args.out)
    summary = {"steps": args.steps, "lr": 1.0, "embedding_size": args.embedding_size,
               "seeds": args.seeds, "d3": {}}
    for d3 in args.d3:
        finals, initials = [], []
        for seed in args.seeds:
            traj = run_toy(d3, steps=args.steps, seed=seed, embedding_size=args.embedding_size)
            rows = [(s, 0, ia) for s, ia in zip(traj["steps"], traj["ia"])]
            atomic_write_text(out / f"toy_d3_{d3}_seed_{seed}.csv", csv_text(["step", "field", "ia"], rows))
            initials.append(traj["ia"][0])
            finals.append(traj["ia"][-1])
            log.info("toy d3=%d seed=%d final IA(E_1)=%.4f", d3, seed, traj["ia"][-1])
        summary["d3"][str(d3)] = {"initial_ia": initials, "final_ia": finals,
                                  "median_final_ia": float(np.median(finals))}
    if len(args.d3) > 1:
        lo, hi = str(min(args.d3)), str(max(args.d3))
        summary["median_small_below_large"] = (
            summary["d3"][lo]["median_final_ia"] < summary["d3"][hi]["median_final_ia"])
    atomic_write_json(out / "toy_summary.json", summary)
    return EXIT_OK


# -- train -----------------------------------------------------------------------

def cmd_train(args):
    from .experiment import run_experiment

    cfg = config_mod.load_config(args.config)
    out = Path(args.out or cfg["output_dir"])
    res = run_experiment(cfg, out_dir=out)
    log.info("test AUC %.5f (best epoch %s) -> %s", res.record.test_auc, res.record.best_epoch, out)
    return EXIT_OK


# -- analyze ---------------------------------------------------------------------

def cmd_analyze(args):
    schema = None
    if args.schema:
        try:
            schema = FieldSchema.from_json(json.loads(Path(args.schema).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read schema {args.schema}: {exc}") from None
    view = view_from_checkpoint(args.checkpoint, schema)
    rep = collapse_report(view, split_groups=args.split_groups,
                          include_diagonal=not args.exclude_diagonal)
    rep["checkpoint"] = str(args.checkpoint)
    write_report_files(rep, args.out, prefix="analysis_report")
    return EXIT_OK


# -- sweep -----------------------------------------------------------------------

def _parse_value(raw, default, key):
    if isinstance(default, bool):
        if raw.lower() in ("true", "1"):
            return True
        if raw.lower() in ("false", "0"):
            return False
        raise UsageError(f"--vary {key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError:
            raise UsageError(f"--vary {key}: expected an integer, got {raw!r}") from None
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError:
            raise UsageError(f"--vary {key}: expected a number, got {raw!r}") from None
    return raw


def parse_vary(items, cfg):
    axes = []
    for item in items:
        if "=" not in item:
            raise UsageError(f"--vary expects key=v1,v2,..., got {item!r}")
        key, vals = item.split("=", 1)
        key = key.strip()
        try:
            default = config_mod.get_path(cfg, key)
        except ConfigError as exc:
            raise UsageError(str(exc)) from None
        values = [_parse_value(v.strip(), default, key) for v in vals.split(",") if v.strip()]
        if not values:
            raise UsageError(f"--vary {key}: no values")
        axes.append((key, values))
    return axes


def _run_cell(cfg):
    from .experiment import run_experiment, summary_ia

    res = run_experiment(cfg)
    mean_ia, concat_ia = summary_ia(res.report)
    return {"test_auc": res.record.test_auc, "mean_ia": mean_ia, "concat_ia": concat_ia,
            "mean_diversity": res.report["mean_diversity"],
            "split_diversity": (res.report["split_diversity"] or {}).get("mean")}


def cmd_sweep(args):
    if not args.seeds:
        raise UsageError("--seeds must not be empty")
    base = config_mod.load_config(args.config)
    axes = parse_vary(args.vary or [], base)
    keys = [k for k, _ in axes]
    cells = list(itertools.product(*[v for _, v in axes])) if axes else [()]
    jobs = []
    for cell in cells:
        for seed in args.seeds:
            cfg = copy.deepcopy(base)
            for k, v in zip(keys, cell):
                config_mod.set_path(cfg, k, v)
            cfg["seed"] = seed
            cfg = config_mod.resolve(cfg)
            jobs.append((cell, seed, cfg))
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        results = list(pool.map(lambda job: _run_cell(job[2]), jobs))
    out = Path(args.out or base["output_dir"])
    run_rows, summary = [], []
    for (cell, seed, _), r in zip(jobs, results):
        run_rows.append(list(cell) + [seed, r["test_auc"], r["mean_ia"], r["concat_ia"]])
    for cell in cells:
        rs = [r for (c, _, _), r in zip(jobs, results) if c == cell]
        summary.append({
            "cell": dict(zip(keys, cell)),
            "n_seeds": len(rs),
            "median_test_auc": float(np.median([r["test_auc"] for r in rs])),
            "median_mean_ia": float(np.median([r["mean_ia"] for r in rs])),
            "median_concat_ia": float(np.median([r["concat_ia"] for r in rs])),
        })
    atomic_write_text(out / "sweep_runs.csv",
                      csv_text(keys + ["seed", "test_auc", "mean_ia", "concat_ia"], run_rows))
    atomic_write_text(out / "sweep_summary.csv", csv_text(
        keys + ["n_seeds", "median_test_auc", "median_mean_ia", "median_concat_ia"],
        [list(s["cell"].values()) + [s["n_seeds"], s["median_test_auc"], s["median_mean_ia"],
                                     s["median_concat_ia"]] for s in summary]))
    atomic_write_json(out / "sweep_summary.json", {"base_config": base, "vary": dict(axes),
                                                   "seeds": args.seeds, "cells": summary})
    return EXIT_OK


# -- gen-data --------------------------------------------------------------------

def cmd_gen_data(args):
    if args.generator == "toy":
        ds = gen_toy(args.d3, seed=args.seed)
    else:
        if not args.cardinalities:
            raise UsageError("two-pattern needs --cardinalities")
        ds = gen_two_pattern(args.cardinalities, n_rows=args.rows, hidden_dim=args.hidden_dim,
                             w1=args.w1, w2=args.w2, noise=args.noise, seed=args.seed)
    save_generated(ds, args.out)
    return EXIT_OK


# -- entry -----------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="collapse-lab",
                                description="Embedding-collapse experiments for multi-field recommenders.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("toy", help="three-field toy experiment (E_1 trained, E_2/E_3 frozen)")
    t.add_argument("--d3", type=_int_list, required=True, help="comma-separated cardinalities of field 3")
    t.add_argument("--steps", type=int, default=5000)
    t.add_argument("--seeds", type=_int_list, default=[0])
    t.add_argument("--embedding-size", type=int, default=10)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_toy)

    tr = sub.add_parser("train", help="train one configured experiment")
    tr.add_argument("--config", required=True)
    tr.add_argument("--out", help="override output_dir")
    tr.set_defaults(func=cmd_train)

    a = sub.add_parser("analyze", help="collapse report for a checkpoint")
    a.add_argument("--checkpoint", required=True, help="checkpoint manifest.json")
    a.add_argument("--schema", help="schema JSON ({'fields': [{name, cardinality}]})")
    a.add_argument("--out", required=True)
    a.add_argument("--split-groups", type=int, default=2)
    a.add_argument("--exclude-diagonal", action="store_true")
    a.set_defaults(func=cmd_analyze)

    s = sub.add_parser("sweep", help="cartesian sweep over config values and seeds")
    s.add_argument("--config", required=True)
    s.add_argument("--vary", action="append", help="dotted.key=v1,v2,... (repeatable)")
    s.add_argument("--seeds", type=_int_list, required=True)
    s.add_argument("--out", help="override output_dir")
    s.set_defaults(func=cmd_sweep)

    g = sub.add_parser("gen-data", help="write a synthetic dataset as CSV + manifest")
    g.add_argument("--generator", choices=["toy", "two-pattern"], required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--d3", type=int, default=3)
    g.add_argument("--cardinalities", type=_int_list)
    g.add_argument("--rows", type=int, default=20000)
    g.add_argument("--hidden-dim", type=int, default=16)
    g.add_argument("--w1", type=float, default=2.0)
    g.add_argument("--w2", type=float, default=2.0)
    g.add_argument("--noise", type=float, default=0.1)
    g.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except TrainingAborted as exc:
        print(f"collapse-lab: training aborted: {exc} {exc.diagnostics}", file=sys.stderr)
        return EXIT_TRAIN
    except CollapseLabError as exc:
        print(f"collapse-lab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
