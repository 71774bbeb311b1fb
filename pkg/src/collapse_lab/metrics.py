"""Collapse diagnostics for embedding tables.

Information abundance (IA) is the l1/l-inf ratio of a matrix's singular
values: an ``D x K`` table whose rows fill all ``K`` directions evenly scores
``K``; a table squeezed onto one direction scores 1.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DegenerateInputError, InsufficientDataError, ShapeError
from .linalg import as_matrix, principal_angle_cosines, singular_values, svd


def _ia_from_sigma(sigma):
    smax = sigma[0] if len(sigma) else 0.0
    if not smax > 0.0:
        raise DegenerateInputError("information abundance of an all-zero matrix is undefined")
    return float(np.sum(sigma) / smax)


def information_abundance(e):
    """``sum(sigma) / max(sigma)``; lies in ``[1, min(rows, cols)]``."""
    return _ia_from_sigma(singular_values(as_matrix(e, "embedding")))


def random_reference_ia(shape, repeats=16, seed=0):
    """Mean IA of ``repeats`` standard-normal matrices of the given shape."""
    rng = np.random.default_rng(seed)
    vals = [information_abundance(rng.standard_normal(shape)) for _ in range(repeats)]
    return float(np.mean(vals))


def normalized_ia(e, mode="per-size", repeats=16, seed=0):
    """IA rescaled for comparisons across embedding sizes.

    ``per-size`` divides by the column count; ``per-random`` divides by the
    mean IA of same-shape Gaussian matrices.
    """
    e = as_matrix(e, "embedding")
    ia = information_abundance(e)
    if mode == "per-size":
        return ia / e.shape[1]
    if mode == "per-random":
        return ia / random_reference_ia(e.shape, repeats=repeats, seed=seed)
    raise ContractError(f"unknown normalisation mode {mode!r}")


def left_basis(e):
    e = as_matrix(e, "embedding")
    res = svd(e)
    if not res.sigma[0] > 0.0:
        raise DegenerateInputError("left singular basis of an all-zero matrix is undefined")
    return res.u


def diversity(e1, e2):
    """``1 - mean(cos(principal angles))`` between the left singular bases."""
    e1 = as_matrix(e1, "e1")
    e2 = as_matrix(e2, "e2")
    if e1.shape != e2.shape:
        raise ShapeError(f"diversity needs equal shapes, got {e1.shape} and {e2.shape}")
    cos = principal_angle_cosines(left_basis(e1), left_basis(e2))
    k = e1.shape[1]
    return float(min(max(1.0 - np.sum(cos) / k, 0.0), 1.0))


def diversity_matrix(tables):
    """Pairwise diversity between equally-shaped tables (symmetric, zero diagonal)."""
    bases = [left_basis(t) for t in tables]
    k = as_matrix(tables[0]).shape[1]
    m = len(tables)
    out = np.zeros((m, m))
    for a in range(m):
        for b in range(a + 1, m):
            cos = principal_angle_cosines(bases[a], bases[b])
            out[a, b] = out[b, a] = min(max(1.0 - np.sum(cos) / k, 0.0), 1.0)
    return out


def split_columns(e, groups):
    """Split a ``D x K`` table into ``groups`` equal column blocks."""
    e = as_matrix(e)
    k = e.shape[1]
    if groups < 1 or k % groups:
        raise ContractError(f"cannot split {k} columns into {groups} equal groups")
    w = k // groups
    return [e[:, g * w:(g + 1) * w] for g in range(groups)]


def mean_offdiag(mat):
    m = mat.shape[0]
    if m < 2:
        return 0.0
    return float(mat[np.triu_indices(m, 1)].mean())


def numerical_rank(e, rel_tol=1e-8):
    sigma = singular_values(as_matrix(e))
    if not sigma[0] > 0.0:
        return 0
    return int(np.sum(sigma > rel_tol * sigma[0]))


@dataclass
class IaGrid:
    """``values[i, j]`` is IA of field ``i``'s sub-embedding used against field ``j``."""

    values: np.ndarray
    field_order: np.ndarray
    raw_ia: np.ndarray

    @property
    def n_fields(self):
        return self.values.shape[0]


def sub_embedding_ia_grid(embeddings, projections):
    """IA of every sub-embedding ``E_i @ W_{i->j}.T``.

    ``projections`` maps ``(i, j)`` to the ``K x K`` matrix ``W_{i->j}``;
    every pair including ``i == j`` must be present.
    """
    n = len(embeddings)
    tables = [as_matrix(e, f"E_{i}") for i, e in enumerate(embeddings)]
    values = np.empty((n, n))
    for i in range(n):
        k = tables[i].shape[1]
        for j in range(n):
            if (i, j) not in projections:
                raise ContractError(f"missing projection W_{i}->{j}")
            w = as_matrix(projections[(i, j)], f"W_{i}->{j}")
            if w.shape[1] != k:
                raise ShapeError(f"W_{i}->{j} has shape {w.shape}, embedding width is {k}")
            values[i, j] = information_abundance(tables[i] @ w.T)
    raw = np.array([information_abundance(t) for t in tables])
    return IaGrid(values=values, field_order=np.argsort(raw, kind="stable"), raw_ia=raw)


def ffm_sub_embedding_ia_grid(embeddings):
    """Grid for field-aware tables whose column slices are the sub-embeddings.

    Field ``i``'s slice for target ``j`` is the ``j``-th (skipping ``i``) block
    of width ``K / (N - 1)``. The diagonal holds the full-table IA.
    """
    tables = [as_matrix(e) for e in embeddings]
    n = len(tables)
    raw = np.array([information_abundance(t) for t in tables])
    values = np.empty((n, n))
    for i in range(n):
        slices = split_columns(tables[i], n - 1)
        for j in range(n):
            if j == i:
                values[i, j] = raw[i]
            else:
                values[i, j] = information_abundance(slices[j if j < i else j - 1])
    return IaGrid(values=values, field_order=np.argsort(raw, kind="stable"), raw_ia=raw)


def _pearson_vs_index(y):
    y = np.asarray(y, dtype=np.float64)
    x = np.arange(len(y), dtype=np.float64)
    xc = x - x.mean()
    yc = y - y.mean()
    denom = np.sqrt(np.sum(xc * xc) * np.sum(yc * yc))
    if denom == 0.0 or np.sum(yc * yc) <= 1e-24 * max(1.0, np.sum(y * y)):
        return 0.0
    return float(np.sum(xc * yc) / denom)


def ia_grid_summaries(grid, include_diagonal=True):
    """Row/column sums of the grid in ascending-IA field order and their
    Pearson correlation with the sorted position."""
    n = grid.n_fields
    if n < 3:
        raise InsufficientDataError(f"need at least 3 fields for correlations, got {n}")
    order = grid.field_order
    vals = grid.values[np.ix_(order, order)].copy()
    if not include_diagonal:
        np.fill_diagonal(vals, 0.0)
    row_sums = vals.sum(axis=1)
    col_sums = vals.sum(axis=0)
    return {
        "row_sums": row_sums,
        "col_sums": col_sums,
        "row_corr": _pearson_vs_index(row_sums),
        "col_corr": _pearson_vs_index(col_sums),
    }


@dataclass
class GradSpectral:
    """Per-field gradient components ``theta`` and their spectral weights."""

    theta: np.ndarray
    alpha: np.ndarray
    source_sigma: np.ndarray
    target_field: int

    @property
    def total(self):
        return self.theta.sum(axis=0)


def gradient_spectral_decomposition(indices, embeddings, loss_grads, target_field=0):
    """Split the FM-interaction gradient of a shared target row into per-field terms.

    For each other field ``i`` with SVD ``E_i = sum_k sigma_k u_k v_k^T``::

        alpha[i, k] = mean_b loss_grads[b] * u_k[x_i^b]
        theta[i]    = sum_k alpha[i, k] * sigma_k * v_k

    so ``theta.sum(0)`` is the gradient of the batch-mean loss w.r.t. the
    target field's embedding row. ``theta`` and ``alpha`` rows of the target
    field are zero.
    """
    x = np.asarray(indices)
    g = np.asarray(loss_grads, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ContractError("gradient decomposition needs a non-empty batch")
    if g.shape != (x.shape[0],):
        raise ShapeError(f"loss_grads must have length {x.shape[0]}")
    n = len(embeddings)
    k = as_matrix(embeddings[0]).shape[1]
    b = x.shape[0]
    theta = np.zeros((n, k))
    alpha = np.zeros((n, k))
    source_sigma = np.zeros((n, k))
    for i in range(n):
        if i == target_field:
            continue
        res = svd(embeddings[i])
        r = len(res.sigma)
        source_sigma[i, :r] = res.sigma
        # u_k^T 1_{x_i^b} is just row x_i^b of U
        alpha[i, :r] = g @ res.u[x[:, i]] / b
        theta[i] = res.v @ (alpha[i, :r] * res.sigma)
    return GradSpectral(theta=theta, alpha=alpha, source_sigma=source_sigma,
                        target_field=target_field)
