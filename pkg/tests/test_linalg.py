import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from collapse_lab.errors import ContractError, NumericalError, ShapeError
from collapse_lab.linalg import (format_matrix, frobenius_norm, jacobi_eigh, matmul,
                                 parse_matrix, principal_angle_cosines, read_matrix, svd,
                                 write_matrix)
from oracles import worked_multi, worked_single, mp_singular_values, triple_loop_matmul

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def small_matrices(max_rows=12, max_cols=6):
    shapes = st.tuples(st.integers(1, max_rows), st.integers(1, max_cols))
    return shapes.flatmap(lambda s: arrays(np.float64, s, elements=finite))


def assert_svd_contract(e, res):
    k = min(e.shape)
    assert res.u.shape == (e.shape[0], k)
    assert res.v.shape == (e.shape[1], k)
    assert np.all(np.diff(res.sigma) <= 0)
    assert np.all(res.sigma >= 0)
    assert np.abs(res.u.T @ res.u - np.eye(k)).max() <= 1e-9
    assert np.abs(res.v.T @ res.v - np.eye(k)).max() <= 1e-9
    assert np.abs(e - res.reconstruct()).max() <= 1e-8 * (1 + res.sigma[0])


# -- matmul ------------------------------------------------------------------------

def test_matmul_identity():
    a = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(matmul(np.eye(2), a), a)


def test_matmul_hand_arithmetic():
    assert np.array_equal(matmul([[1, 2], [3, 4]], [[1], [1]]), [[3], [7]])


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(7)
    a, b = rng.standard_normal((7, 5)), rng.standard_normal((5, 3))
    assert np.abs(matmul(a, b) - triple_loop_matmul(a.tolist(), b.tolist())).max() <= 1e-12


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_is_deterministic():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((40, 30)), rng.standard_normal((30, 20))
    assert matmul(a, b).tobytes() == matmul(a, b).tobytes()


# -- svd ---------------------------------------------------------------------------

def test_svd_diagonal_padded():
    e = np.zeros((4, 2))
    e[0, 0], e[1, 1] = 3.0, 1.0
    assert np.allclose(svd(e).sigma, [3.0, 1.0], atol=1e-14)


def test_svd_worked_pair_matrix():
    e = np.array([[1, 0], [1, 0], [0, 1], [0, 1]], dtype=float)
    assert np.allclose(svd(e).sigma, [math.sqrt(2)] * 2, atol=1e-14)


def test_svd_random_50x8_vs_high_precision_oracle():
    e = np.random.default_rng(3).standard_normal((50, 8))
    ref = mp_singular_values(e)
    got = svd(e).sigma
    assert np.max(np.abs(got - ref) / ref) <= 1e-8


def test_svd_wide_input_by_transposition():
    e = np.random.default_rng(4).standard_normal((3, 7))
    res = svd(e)
    assert_svd_contract(e, res)
    assert np.allclose(res.sigma, mp_singular_values(e), rtol=1e-10)


def test_svd_rank_deficient_completes_basis():
    rng = np.random.default_rng(5)
    e = np.outer(rng.standard_normal(20), rng.standard_normal(5))
    res = svd(e)
    assert_svd_contract(e, res)
    assert res.sigma[1] <= 1e-12 * res.sigma[0]


def test_svd_zero_matrix():
    res = svd(np.zeros((5, 3)))
    assert np.array_equal(res.sigma, np.zeros(3))
    assert np.abs(res.u.T @ res.u - np.eye(3)).max() <= 1e-12


def test_jacobi_non_convergence_carries_residual():
    a = np.random.default_rng(0).standard_normal((6, 6))
    with pytest.raises(NumericalError) as info:
        jacobi_eigh(a + a.T, max_sweeps=0)
    assert "off-diagonal" in str(info.value)


@settings(max_examples=60, deadline=None)
@given(small_matrices())
def test_svd_contract_property(e):
    assert_svd_contract(e, svd(e))


@settings(max_examples=40, deadline=None)
@given(small_matrices(), st.floats(0.01, 100))
def test_svd_scale_equivariance(e, c):
    s1, s2 = svd(c * e).sigma, svd(e).sigma
    scale = max(s2[0], 1e-300)
    assert np.all(np.abs(s1 - c * s2) <= 1e-10 * c * scale + 1e-300)


@settings(max_examples=40, deadline=None)
@given(small_matrices(max_rows=10, max_cols=5), st.integers(1, 6))
def test_svd_zero_row_padding_invariance(e, pad):
    if e.shape[0] < e.shape[1]:
        e = e.T
    padded = np.vstack([e, np.zeros((pad, e.shape[1]))])
    s1, s2 = svd(padded).sigma, svd(e).sigma
    assert np.abs(s1 - s2).max() <= 1e-12 * (1 + s2[0])


# -- principal angles --------------------------------------------------------------

def test_principal_angles_identical():
    u = svd(np.random.default_rng(2).standard_normal((6, 3))).u
    assert np.allclose(principal_angle_cosines(u, u), 1.0, atol=1e-12)


def test_principal_angles_orthogonal_axes():
    i4 = np.eye(4)
    assert np.allclose(principal_angle_cosines(i4[:, :2], i4[:, 2:]), 0.0, atol=1e-15)


def test_principal_angles_worked_pair():
    e = worked_single()
    m = worked_multi()
    u1, u2 = svd(e[:, :2]).u, svd(m[:, 2:]).u
    assert np.allclose(principal_angle_cosines(u1, u2), [1.0, 0.0], atol=1e-12)


def test_principal_angles_reject_non_orthonormal():
    with pytest.raises(ContractError):
        principal_angle_cosines(np.ones((4, 2)), np.eye(4)[:, :2])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 10), st.integers(1, 4))
def test_principal_angles_symmetric(seed, d, k):
    k = min(k, d)
    rng = np.random.default_rng(seed)
    u1 = svd(rng.standard_normal((d, k))).u
    u2 = svd(rng.standard_normal((d, k))).u
    a, b = principal_angle_cosines(u1, u2), principal_angle_cosines(u2, u1)
    assert np.abs(a - b).max() <= 1e-10
    assert np.all((a >= 0) & (a <= 1)) and np.all(np.diff(a) <= 0)


# -- norms and text format ---------------------------------------------------------

@pytest.mark.parametrize("a, expected", [(np.zeros((3, 2)), 0.0), (np.eye(3), math.sqrt(3)),
                                         ([[3.0, 4.0]], 5.0)])
def test_frobenius_norm(a, expected):
    assert frobenius_norm(a) == pytest.approx(expected, abs=1e-15)


@settings(max_examples=40, deadline=None)
@given(small_matrices())
def test_matrix_text_round_trip(e):
    assert np.array_equal(parse_matrix(format_matrix(e)), e)


def test_matrix_file_round_trip(tmp_path):
    e = np.random.default_rng(0).standard_normal((5, 3))
    write_matrix(tmp_path / "m.txt", e)
    assert np.array_equal(read_matrix(tmp_path / "m.txt"), e)
    assert (tmp_path / "m.txt").read_text().splitlines()[0] == "5 3"


def test_matrix_text_rejects_ragged_rows():
    with pytest.raises(ShapeError, match="line 3"):
        parse_matrix("2 2\n1 2\n3\n")


def test_matrix_text_rejects_non_finite():
    with pytest.raises(Exception):
        parse_matrix("1 2\n1 nan\n")
