"""Dense matrix kernel: products, SVD through a Jacobi-diagonalised Gram matrix,
principal angles and the plain-text matrix format.

Matrices are ``numpy.ndarray`` objects of dtype float64 and ndim 2.
"""
from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, NumericalError, ShapeError

JACOBI_TOL = 1e-14
JACOBI_MAX_SWEEPS = 100
TINY_SIGMA = 1e-12


def as_matrix(a, name="matrix"):
    """Validate ``a`` as a finite 2-D float64 array and return it."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericalError(f"{name} contains non-finite entries")
    return m


def matmul(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def frobenius_norm(a):
    a = np.asarray(a, dtype=np.float64)
    return float(np.sqrt(np.sum(a * a)))


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``e = u @ diag(sigma) @ v.T`` with ``sigma`` non-increasing."""

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    def reconstruct(self):
        return (self.u * self.sigma) @ self.v.T


def _round_robin(n):
    """Rounds of disjoint index pairs covering every pair of ``range(n)`` once."""
    players = list(range(n)) + ([None] if n % 2 else [])
    size = len(players)
    rounds = []
    for _ in range(size - 1):
        pairs = []
        for k in range(size // 2):
            p, q = players[k], players[size - 1 - k]
            if p is not None and q is not None:
                pairs.append((min(p, q), max(p, q)))
        if pairs:
            rounds.append((np.array([p for p, _ in pairs]), np.array([q for _, q in pairs])))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def jacobi_eigh(a, tol=JACOBI_TOL, max_sweeps=JACOBI_MAX_SWEEPS):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Each sweep visits every off-diagonal pair once, grouped into rounds of
    disjoint pairs (round-robin ordering) so a whole round is applied as one
    orthogonal similarity. Converged when every off-diagonal entry is at most
    ``tol`` times the largest diagonal magnitude.

    Returns ``(eigenvalues, eigenvectors)`` sorted by descending eigenvalue.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ShapeError(f"jacobi_eigh needs a square matrix, got {a.shape}")
    v = np.eye(n)
    rounds = _round_robin(n)
    off_mask = ~np.eye(n, dtype=bool)

    def off_norm():
        scale = np.max(np.abs(np.diag(a))) if n else 0.0
        off = np.max(np.abs(a[off_mask])) if n > 1 else 0.0
        return off, scale

    off, scale = off_norm()
    sweeps = 0
    while off > tol * scale:
        if sweeps == max_sweeps:
            raise NumericalError(
                f"Jacobi failed to converge in {max_sweeps} sweeps; "
                f"residual off-diagonal norm {np.sqrt(np.sum(a[off_mask] ** 2)):.3e}"
            )
        for p, q in rounds:
            apq = a[p, q]
            active = np.abs(apq) > 0.0
            if not np.any(active):
                continue
            c = np.ones(len(p))
            s = np.zeros(len(p))
            # a huge theta (tiny a_pq) means a negligible rotation: t -> 1/(2 theta)
            with np.errstate(over="ignore"):
                theta = (a[q, q][active] - a[p, p][active]) / (2.0 * apq[active])
                t = np.sign(theta) / (np.abs(theta) + np.hypot(theta, 1.0))
            t[theta == 0.0] = 1.0
            c[active] = 1.0 / np.sqrt(t * t + 1.0)
            s[active] = t * c[active]
            rot = np.eye(n)
            rot[p, p] = c
            rot[q, q] = c
            rot[p, q] = s
            rot[q, p] = -s
            a = rot.T @ a @ rot
            a = 0.5 * (a + a.T)
            a[p, q] = 0.0
            a[q, p] = 0.0
            v = v @ rot
        sweeps += 1
        off, scale = off_norm()
    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], v[:, order]


def _complete_columns(u, filled, n_rows):
    """Fill columns of ``u`` not flagged in ``filled`` with canonical basis
    vectors orthogonalised against the existing columns, taken in index order."""
    basis_idx = 0
    for k in range(u.shape[1]):
        if filled[k]:
            continue
        while basis_idx < n_rows:
            w = np.zeros(n_rows)
            w[basis_idx] = 1.0
            basis_idx += 1
            have = u[:, filled]
            for _ in range(2):
                w = w - have @ (have.T @ w)
            norm = np.linalg.norm(w)
            if norm > 1e-6:
                u[:, k] = w / norm
                filled[k] = True
                break
    return u


def _refine_sigma(e, v):
    # ||e v_k|| instead of sqrt(lambda_k): the Gram eigenvalues carry an absolute
    # error of eps * sigma_max**2, which turns exact zeros into ~1e-8 * sigma_max
    sigma = np.linalg.norm(e @ v, axis=0)
    order = np.argsort(-sigma, kind="stable")
    return sigma[order], v[:, order]


def svd(e, tol=JACOBI_TOL, max_sweeps=JACOBI_MAX_SWEEPS):
    """Thin SVD of ``e`` from the Jacobi eigen-decomposition of its Gram matrix.

    Wide inputs (cols > rows) are handled by transposition.
    """
    e = as_matrix(e, "svd input")
    rows, cols = e.shape
    if rows == 0 or cols == 0:
        raise ShapeError("svd needs at least one row and one column")
    if cols > rows:
        t = svd(e.T, tol=tol, max_sweeps=max_sweeps)
        return SvdResult(u=t.v, sigma=t.sigma, v=t.u)
    lam, v = jacobi_eigh(e.T @ e, tol=tol, max_sweeps=max_sweeps)
    sigma, v = _refine_sigma(e, v)
    smax = sigma[0]
    u = np.zeros((rows, cols))
    filled = np.zeros(cols, dtype=bool)
    for k in range(cols):
        if smax > 0.0 and sigma[k] > TINY_SIGMA * smax:
            w = e @ v[:, k] / sigma[k]
            have = u[:, filled]
            # re-orthogonalise: Gram-based columns drift for small sigma
            for _ in range(2):
                w = w - have @ (have.T @ w)
            norm = np.linalg.norm(w)
            if norm > 1e-6:
                u[:, k] = w / norm
                filled[k] = True
    if not np.all(filled):
        u = _complete_columns(u, filled, rows)
    return SvdResult(u=u, sigma=sigma, v=v)


def singular_values(e):
    """Singular values only (skips recovery of the left basis)."""
    e = as_matrix(e, "svd input")
    if e.shape[1] > e.shape[0]:
        e = e.T
    _, v = jacobi_eigh(e.T @ e)
    return _refine_sigma(e, v)[0]


def check_orthonormal(u, tol=1e-6, name="basis"):
    u = as_matrix(u, name)
    err = np.max(np.abs(u.T @ u - np.eye(u.shape[1]))) if u.size else 0.0
    if err > tol:
        raise ContractError(f"{name} columns are not orthonormal (max deviation {err:.2e})")
    return u


def principal_angle_cosines(u1, u2):
    """Cosines of the principal angles between two orthonormal column bases,
    non-increasing and clamped to [0, 1]."""
    u1 = check_orthonormal(u1, name="u1")
    u2 = check_orthonormal(u2, name="u2")
    if u1.shape != u2.shape:
        raise ShapeError(f"basis shapes differ: {u1.shape} vs {u2.shape}")
    cos = singular_values(u1.T @ u2)
    if np.any(cos > 1.0 + 1e-9):
        raise NumericalError(f"principal-angle cosine {cos.max():.12f} exceeds 1")
    return np.clip(cos, 0.0, 1.0)


def orthonormalize(a):
    """Orthonormal basis for the column space of ``a`` (same column count)."""
    return svd(a).u


# -- text format ---------------------------------------------------------------

def format_matrix(a):
    a = as_matrix(a)
    buf = io.StringIO()
    buf.write(f"{a.shape[0]} {a.shape[1]}\n")
    for row in a:
        buf.write(" ".join(repr(float(x)) for x in row))
        buf.write("\n")
    return buf.getvalue()


def parse_matrix(text, source="<string>"):
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ShapeError(f"{source}: empty matrix file")
    try:
        rows, cols = (int(t) for t in lines[0].split())
    except ValueError:
        raise ShapeError(f"{source}: header must be 'rows cols'") from None
    if len(lines) - 1 != rows:
        raise ShapeError(f"{source}: header says {rows} rows, found {len(lines) - 1}")
    data = np.empty((rows, cols))
    for r, ln in enumerate(lines[1:]):
        vals = ln.split()
        if len(vals) != cols:
            raise ShapeError(f"{source}: line {r + 2} has {len(vals)} values, expected {cols}")
        data[r] = [float(x) for x in vals]
    return as_matrix(data.reshape(rows, cols), source)


def write_matrix(path, a):
    from .fileio import atomic_write_text

    atomic_write_text(path, format_matrix(a))


def read_matrix(path):
    path = Path(path)
    return parse_matrix(path.read_text(), source=str(path))
