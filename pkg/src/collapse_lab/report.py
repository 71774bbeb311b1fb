"""CollapseReport assembly from a trained model or an exported checkpoint."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .engine import load_manifest, load_slot, save_checkpoint
from .errors import DataError, InsufficientDataError
from .fileio import atomic_write_json, atomic_write_text, csv_text
from .linalg import frobenius_norm, read_matrix, write_matrix
from .metrics import (diversity_matrix, ffm_sub_embedding_ia_grid, ia_grid_summaries,
                      information_abundance, mean_offdiag, normalized_ia, split_columns,
                      sub_embedding_ia_grid)


@dataclass
class EmbeddingView:
    """Tables ``tables[m][i]`` and optional projection maps ``projections[m]``."""

    tables: list
    projections: list
    interaction: str = "unknown"

    @property
    def num_sets(self):
        return len(self.tables)

    @property
    def n_fields(self):
        return len(self.tables[0])

    @classmethod
    def from_model(cls, model, layer=0):
        m = model.spec.num_sets
        tables = [model.embedding_tables(s) for s in range(m)]
        projs = [model.projection_blocks(s, layer) or None for s in range(m)]
        return cls(tables, projs, model.spec.interaction)


def _listify(a):
    return np.asarray(a).tolist()


def _grid_for(view, m, include_diagonal):
    if view.interaction == "ffm":
        grid = ffm_sub_embedding_ia_grid(view.tables[m])
        include_diagonal = False
    elif view.projections[m]:
        grid = sub_embedding_ia_grid(view.tables[m], view.projections[m])
    else:
        return None, None
    try:
        summ = ia_grid_summaries(grid, include_diagonal=include_diagonal)
    except InsufficientDataError:
        summ = None
    return grid, summ


def collapse_report(view, split_groups=2, include_diagonal=True, trajectory=None):
    """Per-field IA, sub-embedding grids with summaries, block norms and
    embedding-set diversity, as a JSON-ready dict."""
    n_sets, n = view.num_sets, view.n_fields
    rep = {
        "num_sets": n_sets,
        "interaction": view.interaction,
        "ia_per_field": [[information_abundance(t) for t in view.tables[m]] for m in range(n_sets)],
        "normalized_ia_per_size": [[normalized_ia(t) for t in view.tables[m]] for m in range(n_sets)],
    }
    concat = [np.hstack([view.tables[m][i] for m in range(n_sets)]) for i in range(n)]
    rep["concatenated_ia"] = [information_abundance(t) for t in concat]

    grids, orders, rs, cs, rc, cc, norms = [], [], [], [], [], [], []
    for m in range(n_sets):
        grid, summ = _grid_for(view, m, include_diagonal)
        if grid is None:
            continue
        grids.append(_listify(grid.values))
        orders.append(_listify(grid.field_order))
        if summ is not None:
            rs.append(_listify(summ["row_sums"]))
            cs.append(_listify(summ["col_sums"]))
            rc.append(summ["row_corr"])
            cc.append(summ["col_corr"])
        if view.projections[m]:
            nm = np.zeros((n, n))
            for (i, j), w in view.projections[m].items():
                nm[i, j] = frobenius_norm(w)
            norms.append(_listify(nm))
    rep["ia_grid"] = grids or None
    rep["field_order"] = orders or None
    rep["row_sums"] = rs or None
    rep["col_sums"] = cs or None
    rep["row_corr"] = rc or None
    rep["col_corr"] = cc or None
    rep["mean_row_corr"] = float(np.mean(rc)) if rc else None
    rep["mean_col_corr"] = float(np.mean(cc)) if cc else None
    rep["block_norms"] = norms or None

    if n_sets > 1:
        mats = [diversity_matrix([view.tables[m][i] for m in range(n_sets)]) for i in range(n)]
        rep["diversity_matrix"] = [_listify(d) for d in mats]
        rep["mean_diversity"] = float(np.mean([mean_offdiag(d) for d in mats]))
    else:
        rep["diversity_matrix"] = None
        rep["mean_diversity"] = None
    k = view.tables[0][0].shape[1]
    if split_groups > 1 and k % split_groups == 0:
        mats = [diversity_matrix(split_columns(t, split_groups)) for t in concat]
        rep["split_diversity"] = {
            "groups": split_groups,
            "matrix": [_listify(d) for d in mats],
            "mean": float(np.mean([mean_offdiag(d) for d in mats])),
        }
    else:
        rep["split_diversity"] = None
    rep["ia_trajectory"] = trajectory or []
    return rep


# -- checkpoints with analysis exports ------------------------------------------

def save_model_checkpoint(model, directory, layer=0):
    """Checkpoint every slot and export the projection blocks of one cross layer
    as individual ``W_{i}_{j}`` matrices per embedding set."""
    directory = Path(directory)
    n, m = model.n_fields, model.spec.num_sets
    embeddings = [{"set": s, "field": i, "slot": model.emb_name(s, i)}
                  for s in range(m) for i in range(n)]
    projections = []
    for s in range(m):
        for (i, j), w in sorted(model.projection_blocks(s, layer).items()):
            fname = f"set{s}_W_{i}_{j}.txt"
            write_matrix(directory / fname, w)
            projections.append({"set": s, "src": i, "dst": j, "name": f"W_{i}_{j}",
                                "file": fname, "shape": list(w.shape)})
    extra = {"exports": {"num_sets": m, "n_fields": n, "interaction": model.spec.interaction,
                         "layer": layer, "embeddings": embeddings, "projections": projections}}
    return save_checkpoint(model.store, directory, extra)


def view_from_checkpoint(manifest_path, schema=None):
    manifest = load_manifest(manifest_path)
    exports = manifest.get("exports")
    if not exports:
        raise DataError(f"{manifest_path}: manifest has no 'exports' section")
    m, n = int(exports["num_sets"]), int(exports["n_fields"])
    if schema is not None and schema.n_fields != n:
        raise DataError(f"schema has {schema.n_fields} fields, checkpoint has {n}")
    tables = [[None] * n for _ in range(m)]
    for e in exports["embeddings"]:
        t = load_slot(manifest_path, manifest, e["slot"])
        if schema is not None and t.shape[0] != schema.cardinalities[e["field"]]:
            raise DataError(f"table {e['slot']} has {t.shape[0]} rows, schema says "
                            f"{schema.cardinalities[e['field']]}")
        tables[e["set"]][e["field"]] = t
    if any(t is None for row in tables for t in row):
        raise DataError("checkpoint is missing embedding tables")
    projections = [dict() for _ in range(m)]
    base = Path(manifest_path).parent
    for p in exports.get("projections", []):
        w = read_matrix(base / p["file"])
        if list(w.shape) != list(p["shape"]):
            raise DataError(f"{p['file']}: shape {w.shape} != manifest {p['shape']}")
        projections[p["set"]][(p["src"], p["dst"])] = w
    projections = [pr or None for pr in projections]
    return EmbeddingView(tables, projections, exports.get("interaction", "unknown"))


def write_report_files(rep, out_dir, prefix="collapse_report"):
    """JSON report plus plot-ready CSV tables."""
    out_dir = Path(out_dir)
    atomic_write_json(out_dir / f"{prefix}.json", rep)
    rows = [(m, i, ia) for m, per in enumerate(rep["ia_per_field"]) for i, ia in enumerate(per)]
    atomic_write_text(out_dir / "ia_per_field.csv", csv_text(["set", "field", "ia"], rows))
    if rep["ia_grid"]:
        rows = [(m, i, j, v) for m, g in enumerate(rep["ia_grid"])
                for i, row in enumerate(g) for j, v in enumerate(row)]
        atomic_write_text(out_dir / "ia_grid.csv", csv_text(["set", "i", "j", "ia"], rows))
    if rep["block_norms"]:
        rows = [(m, i, j, v) for m, g in enumerate(rep["block_norms"])
                for i, row in enumerate(g) for j, v in enumerate(row)]
        atomic_write_text(out_dir / "block_norms.csv", csv_text(["set", "i", "j", "norm"], rows))
    if rep["diversity_matrix"]:
        rows = [(f, a, b, v) for f, d in enumerate(rep["diversity_matrix"])
                for a, row in enumerate(d) for b, v in enumerate(row) if a < b]
        atomic_write_text(out_dir / "diversity.csv", csv_text(["field", "set_a", "set_b", "div"], rows))


def trajectory_csv(trajectory):
    return csv_text(["step", "field", "ia", "set"],
                    [(r["step"], r["field"], r["ia"], r["set"]) for r in trajectory])
