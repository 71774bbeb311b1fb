"""Multi-field categorical datasets: synthetic generators, CSV ingestion,
splits, subsampling and batching."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .engine import sigmoid
from .errors import ConfigError, DataError
from .fileio import atomic_write_json, atomic_write_text
from .linalg import write_matrix
from .models import FieldSchema, pair_index

OOV = 0


@dataclass
class Dataset:
    schema: FieldSchema
    x: np.ndarray           # (n, N) int64 indices
    y: np.ndarray           # (n,) int64 labels in {0, 1}
    provenance: str
    vocab: list | None = None       # per field: list of tokens, position = index
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.int64).reshape(-1, self.schema.n_fields)
        self.y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        if len(self.x) != len(self.y):
            raise DataError("index and label counts differ")
        cards = np.array(self.schema.cardinalities)
        if len(self.x) and (self.x.min() < 0 or np.any(self.x.max(axis=0) >= cards)):
            raise DataError("an index exceeds its field cardinality")
        if not np.all((self.y == 0) | (self.y == 1)):
            raise DataError("labels must be 0 or 1")

    def __len__(self):
        return len(self.y)

    def take(self, rows):
        return Dataset(self.schema, self.x[rows], self.y[rows], self.provenance, self.vocab, self.extras)


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.y)


@dataclass
class SplitSpec:
    ratios: tuple = (8, 1, 1)
    seed: int = 0


def _stream(seed, *path):
    return np.random.default_rng(np.random.SeedSequence([int(seed), *path]))


# -- generators ----------------------------------------------------------------

def gen_toy(d3, seed=0):
    """Three fields; every ``(x1, x2)`` in ``100 x 100`` appears once with a
    uniform ``x3`` and a fair-coin label.

    ``x3`` and ``y`` come from separate streams, so the ``(x1, x2, y)`` multiset
    does not depend on ``d3``.
    """
    d3 = int(d3)
    if d3 < 1:
        raise ConfigError(f"d3 must be >= 1, got {d3}")
    x1, x2 = np.meshgrid(np.arange(100), np.arange(100), indexing="ij")
    x3 = _stream(seed, 11).integers(0, d3, size=10000)
    y = _stream(seed, 12).integers(0, 2, size=10000)
    x = np.stack([x1.ravel(), x2.ravel(), x3], axis=1)
    schema = FieldSchema(["x1", "x2", "x3"], [100, 100, d3])
    return Dataset(schema, x, y, "toy", extras={"seed": int(seed), "d3": d3})


def gen_two_pattern(cardinalities, n_rows=20000, hidden_dim=4, w1=1.0, w2=1.0,
                    noise=0.5, pairs_per_pattern=None, seed=0):
    """Labels driven by two pairwise-interaction scores on disjoint field pairs.

    Each pattern ``p`` has its own hidden bank ``H_p[i]`` (``D_i x hidden_dim``)
    and pair set ``S_p``; its score is ``sum_{(i,j) in S_p} H_p[i][x_i] . H_p[j][x_j]``
    standardised to unit variance. The label logit is
    ``w1 * g1 + w2 * g2 + noise * eps`` with standard-normal ``eps``.
    """
    cards = [int(c) for c in cardinalities]
    n = len(cards)
    if n < 4:
        raise ConfigError(f"two-pattern data needs at least 4 fields, got {n}")
    schema = FieldSchema.from_cardinalities(cards)
    pairs = pair_index(n)
    order = _stream(seed, 21).permutation(len(pairs))
    per = pairs_per_pattern or len(pairs) // 2
    if 2 * per > len(pairs) or per < 1:
        raise ConfigError(f"cannot draw two disjoint sets of {per} pairs from {len(pairs)}")
    pair_sets = [[pairs[k] for k in sorted(order[:per])],
                 [pairs[k] for k in sorted(order[per:2 * per])]]
    rng_x = _stream(seed, 22)
    x = np.stack([rng_x.integers(0, d, size=n_rows) for d in cards], axis=1)
    banks, scores = [], []
    for p in range(2):
        rng_h = _stream(seed, 23, p)
        bank = [rng_h.standard_normal((d, hidden_dim)) for d in cards]
        g = np.zeros(n_rows)
        for i, j in pair_sets[p]:
            g += np.sum(bank[i][x[:, i]] * bank[j][x[:, j]], axis=1)
        std = g.std()
        scores.append(g / std if std > 0 else g)
        banks.append(bank)
    eps = _stream(seed, 24).standard_normal(n_rows)
    logit = w1 * scores[0] + w2 * scores[1] + noise * eps
    y = (_stream(seed, 25).random(n_rows) < sigmoid(logit)).astype(np.int64)
    extras = {
        "seed": int(seed), "hidden_dim": hidden_dim, "w1": w1, "w2": w2, "noise": noise,
        "pair_sets": [[list(pr) for pr in s] for s in pair_sets],
        "hidden_banks": banks,
    }
    return Dataset(schema, x, y, "two-pattern", extras=extras)


def save_generated(ds, out_dir):
    """Write the dataset CSV and a JSON manifest (hidden banks as matrix files)."""
    out_dir = Path(out_dir)
    export_csv(ds, out_dir / "data.csv")
    manifest = {"provenance": ds.provenance, "schema": ds.schema.to_json(), "rows": len(ds),
                "csv": "data.csv"}
    for key, val in ds.extras.items():
        if key == "hidden_banks":
            files = []
            for p, bank in enumerate(val):
                for i, mat in enumerate(bank):
                    fname = f"hidden_{p}_{i}.txt"
                    write_matrix(out_dir / fname, mat)
                    files.append({"pattern": p, "field": i, "file": fname})
            manifest["hidden_banks"] = files
        else:
            manifest[key] = val
    atomic_write_json(out_dir / "manifest.json", manifest)
    return out_dir / "manifest.json"


# -- CSV -----------------------------------------------------------------------

def load_csv(path, vocab=None):
    """Read a header + rows CSV whose last column is ``label``.

    Without ``vocab`` a vocabulary is built per field in first-appearance order,
    with index 0 reserved for out-of-vocabulary tokens. With ``vocab`` (from a
    training file) unseen tokens map to 0.
    """
    path = Path(path)
    try:
        fh = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if not header or header[-1].strip() != "label":
            raise DataError(f"{path}:1: last column must be 'label'")
        names = [h.strip() for h in header[:-1]]
        n = len(names)
        if n < 2:
            raise DataError(f"{path}:1: need at least two feature columns")
        frozen = vocab is not None
        tokens = [list(v) for v in vocab] if frozen else [[""] for _ in range(n)]
        lookup = [{t: k for k, t in enumerate(v) if k != OOV} for v in tokens]
        xs, ys = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != n + 1:
                raise DataError(f"{path}:{lineno}: expected {n + 1} columns, got {len(row)}")
            lab = row[-1].strip()
            if lab not in ("0", "1"):
                raise DataError(f"{path}:{lineno}: label must be 0 or 1, got {lab!r}")
            idx = []
            for f, tok in enumerate(row[:-1]):
                k = lookup[f].get(tok)
                if k is None:
                    if frozen:
                        k = OOV
                    else:
                        k = len(tokens[f])
                        tokens[f].append(tok)
                        lookup[f][tok] = k
                idx.append(k)
            xs.append(idx)
            ys.append(int(lab))
    schema = FieldSchema(names, [len(t) for t in tokens])
    x = np.array(xs, dtype=np.int64).reshape(-1, n)
    return Dataset(schema, x, np.array(ys, dtype=np.int64), "csv", vocab=tokens)


def export_csv(ds, path):
    """Write ``ds`` in the CSV dialect :func:`load_csv` reads.

    Tokens come from the vocabulary when present, otherwise the raw index.
    """
    names = ds.schema.names
    lines = [",".join(names + ["label"])]
    for row, lab in zip(ds.x, ds.y):
        if ds.vocab is not None:
            toks = [ds.vocab[f][k] for f, k in enumerate(row)]
        else:
            toks = [str(k) for k in row]
        lines.append(",".join(toks + [str(lab)]))
    atomic_write_text(path, "\n".join(lines) + "\n")


# -- splitting and batching ----------------------------------------------------

def split(ds, spec=None):
    """Seeded shuffle, then contiguous train/val/test cuts (8/1/1 by default)."""
    spec = spec or SplitSpec()
    ratios = np.asarray(spec.ratios, dtype=np.float64)
    if len(ratios) != 3 or np.any(ratios <= 0):
        raise ConfigError("split ratios must be three positive numbers")
    n = len(ds)
    if n < 10:
        raise ConfigError(f"need at least 10 rows to split, got {n}")
    perm = _stream(spec.seed, 31).permutation(n)
    frac = np.cumsum(ratios) / ratios.sum()
    a = int(np.floor(frac[0] * n + 1e-9))
    b = int(np.floor(frac[1] * n + 1e-9))
    return ds.take(perm[:a]), ds.take(perm[a:b]), ds.take(perm[b:])


def batches(ds, batch_size, epoch_seed):
    """Yield shuffled minibatches; the final short batch is kept."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    perm = _stream(epoch_seed, 41).permutation(len(ds))
    for lo in range(0, len(ds), batch_size):
        rows = perm[lo:lo + batch_size]
        yield Batch(ds.x[rows], ds.y[rows])


def subsample(ds, fraction, seed=0):
    """Seeded subset without replacement of ``round(fraction * n)`` rows.

    Subsets are prefixes of one seeded permutation, so smaller fractions are
    nested inside larger ones for the same seed.
    """
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"fraction must be in (0, 1], got {fraction}")
    size = int(round(fraction * len(ds)))
    if size == 0:
        raise ConfigError(f"fraction {fraction} of {len(ds)} rows is empty")
    if fraction == 1.0:
        return ds
    perm = _stream(seed, 51).permutation(len(ds))
    return ds.take(np.sort(perm[:size]))
