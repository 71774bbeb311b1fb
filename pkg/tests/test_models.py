import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from collapse_lab.engine import Tape
from collapse_lab.errors import ConfigError, DataError
from collapse_lab.metrics import information_abundance
from collapse_lab.models import (INTERACTIONS, FieldSchema, Model, ModelSpec, interact_dcnv2,
                                 interact_dnn_concat, interact_ffm, interact_fm, interact_fwfm,
                                 interact_ipnn, projection_block, unitary_reg_loss,
                                 unitary_reg_terms)
from constructions import (block_diagonal_dcnv2, concat_dnn, model_pair, output_gap,
                           projected_dnn)
from oracles import model_gradient_error, perturb_offsets

CARDS = [5, 4, 6, 3]


def sample(rng, cards, b):
    return np.stack([rng.integers(0, c, size=b) for c in cards], axis=1)


# -- schema and spec -------------------------------------------------------------

def test_schema_invariants():
    with pytest.raises(ConfigError):
        FieldSchema.from_cardinalities([5])
    with pytest.raises(ConfigError):
        FieldSchema.from_cardinalities([5, 0])
    s = FieldSchema(["a", "b"], [2, 3])
    assert FieldSchema.from_json(s.to_json()) == s


def test_ffm_divisibility():
    with pytest.raises(ConfigError, match="divisible"):
        Model(FieldSchema.from_cardinalities(CARDS), ModelSpec(interaction="ffm", embedding_size=4))


def test_unknown_interaction():
    with pytest.raises(ConfigError):
        ModelSpec(interaction="autoint").validate()


@pytest.mark.parametrize("kind", ["fm", "fwfm", "ipnn", "dnn_concat"])
def test_linear_me_without_projection_is_rejected(kind):
    schema = FieldSchema.from_cardinalities(CARDS)
    with pytest.raises(ConfigError, match="equivalent to a single embedding"):
        Model(schema, ModelSpec(interaction=kind, num_sets=2, me_nonlinear_projection=False))
    with pytest.raises(ConfigError):
        Model(schema, ModelSpec(interaction=kind, num_sets=2, projection_activation="identity"))
    Model(schema, ModelSpec(interaction=kind, num_sets=2, mlp=(4, 4)))


def test_projection_default_on_only_for_me():
    assert ModelSpec(num_sets=1).me_nonlinear_projection is False
    assert ModelSpec(num_sets=3).me_nonlinear_projection is True


# -- initialization --------------------------------------------------------------

def test_init_is_deterministic_and_sets_differ():
    schema = FieldSchema.from_cardinalities(CARDS)
    spec = ModelSpec(interaction="fm", num_sets=2, embedding_size=3, mlp=(4, 4))
    a, b = Model(schema, spec, seed=9), Model(schema, spec, seed=9)
    for n in a.store.names():
        assert np.array_equal(a.store[n], b.store[n])
    for i in range(len(CARDS)):
        assert not np.array_equal(a.store["emb/0/%d" % i], a.store["emb/1/%d" % i])


def test_unit_scale_init_variance():
    schema = FieldSchema.from_cardinalities([100, 3])
    m = Model(schema, ModelSpec(interaction="fm", embedding_size=10, init_scale=1.0, mlp=(4,)))
    assert 0.8 <= m.store["emb/0/0"].var() <= 1.2


# -- interaction modules ---------------------------------------------------------

def test_fm_examples():
    assert interact_fm([[1.0, 2.0], [3.0, 4.0]]).item() == 11.0
    assert interact_fm([np.zeros(3)] * 4).item() == 0.0


def test_fm_matches_double_loop():
    e = np.random.default_rng(0).standard_normal((4, 5))
    brute = sum(e[i] @ e[j] for i in range(4) for j in range(i))
    assert abs(interact_fm(list(e)).item() - brute) <= 1e-12


def test_fwfm_examples():
    e = np.random.default_rng(1).standard_normal((4, 3))
    assert interact_fwfm(list(e), np.ones((1, 6))).item() == pytest.approx(interact_fm(list(e)).item(), abs=1e-12)
    assert interact_fwfm(list(e), np.zeros((1, 6))).item() == 0.0
    r = np.random.default_rng(2).standard_normal((1, 6))
    pairs = [(i, j) for i in range(4) for j in range(i + 1, 4)]
    brute = sum(r[0, p] * (e[i] @ e[j]) for p, (i, j) in enumerate(pairs))
    assert abs(interact_fwfm(list(e), r).item() - brute) <= 1e-12


def test_ffm_examples():
    e = np.random.default_rng(3).standard_normal((2, 4))
    assert interact_ffm(list(e)).item() == pytest.approx(e[0] @ e[1], abs=1e-12)
    assert interact_ffm([np.zeros(4)] * 3).item() == 0.0
    e = np.random.default_rng(4).standard_normal((3, 4))
    # width 2 slices; field i's slice for target j skips i itself
    sl = {(0, 1): e[0, 0:2], (0, 2): e[0, 2:4], (1, 0): e[1, 0:2], (1, 2): e[1, 2:4],
          (2, 0): e[2, 0:2], (2, 1): e[2, 2:4]}
    brute = sl[0, 1] @ sl[1, 0] + sl[0, 2] @ sl[2, 0] + sl[1, 2] @ sl[2, 1]
    assert abs(interact_ffm(list(e)).item() - brute) <= 1e-12


def test_ffm_bad_width():
    with pytest.raises(ConfigError):
        interact_ffm([np.ones(5)] * 3)


def test_ipnn_examples():
    assert interact_ipnn([[1.0, 2.0], [3.0, 4.0]]).tolist() == [11.0, 1.0, 2.0, 3.0, 4.0]
    out = interact_ipnn([[1.0, 0.0], [0.0, 1.0]])
    assert out[0] == 0.0 and out[1:].tolist() == [1.0, 0.0, 0.0, 1.0]
    e = np.random.default_rng(5).standard_normal((4, 3))
    dots = [e[i] @ e[j] for i in range(4) for j in range(i + 1, 4)]
    assert np.abs(interact_ipnn(list(e)) - np.concatenate([dots, e.ravel()])).max() <= 1e-12


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 6), st.integers(1, 5), st.integers(0, 1000))
def test_dnn_concat_length_and_permutation(n, k, seed):
    e = np.random.default_rng(seed).standard_normal((n, k))
    out = interact_dnn_concat(list(e))
    assert out.shape == (n * k,)
    perm = np.random.default_rng(seed + 1).permutation(n)
    assert np.array_equal(interact_dnn_concat(list(e[perm])), e[perm].ravel())


def test_dnn_concat_pair():
    assert interact_dnn_concat([[1.0], [2.0]]).tolist() == [1.0, 2.0]


def test_dcnv2_examples():
    out = interact_dcnv2([[1.0], [0.0]], [(np.eye(2), np.zeros((1, 2)))])
    assert out.tolist() == [2.0, 0.0]
    e = np.random.default_rng(6).standard_normal((3, 2))
    out = interact_dcnv2(list(e), [(np.zeros((6, 6)), np.zeros((1, 6)))])
    assert np.array_equal(out, e.ravel())


def test_dcnv2_two_layers_vs_recurrence():
    rng = np.random.default_rng(7)
    e = rng.standard_normal((3, 2))
    layers = [(rng.standard_normal((6, 6)), rng.standard_normal((1, 6))) for _ in range(2)]
    x0 = e.ravel()
    x = x0.copy()
    for w, b in layers:
        x = x0 * (w @ x + b[0]) + x
    assert np.abs(interact_dcnv2(list(e), layers) - x).max() <= 1e-12


def test_projection_block_convention():
    w = np.arange(36.0).reshape(6, 6)
    # W_{0->2} sits at row-block 2, column-block 0
    assert np.array_equal(projection_block(w, 3, 0, 2), w[4:6, 0:2])


# -- forward ---------------------------------------------------------------------

def _manual_se_logits(model, x):
    """SE forward written directly in numpy."""
    n = model.n_fields
    e = [model.store[model.emb_name(0, i)][x[:, i]] for i in range(n)]
    kind = model.spec.interaction
    if kind == "fm":
        h = sum(np.sum(e[i] * e[j], axis=1, keepdims=True) for i in range(n) for j in range(i + 1, n))
    else:
        x0 = np.hstack(e)
        h = x0
        for layer in range(model.spec.cross_layers):
            w = model.store[model.cross_name(0, layer, "W")]
            b = model.store[model.cross_name(0, layer, "b")]
            h = x0 * (h @ w.T + b) + h
    for layer in range(len(model.mlp_sizes)):
        h = h @ model.store[f"mlp/{layer}/W"].T + model.store[f"mlp/{layer}/b"]
        if layer < len(model.mlp_sizes) - 1:
            h = np.maximum(h, 0.0)
    return h[:, 0]


@pytest.mark.parametrize("kind", ["fm", "dcnv2"])
def test_single_set_matches_direct_forward(kind):
    schema = FieldSchema.from_cardinalities(CARDS)
    model = Model(schema, ModelSpec(interaction=kind, embedding_size=3, cross_layers=2,
                                    mlp=(5, 4), init_scale=0.5), seed=3)
    x = sample(np.random.default_rng(0), CARDS, 50)
    assert np.abs(model.logits(x) - _manual_se_logits(model, x)).max() <= 1e-12


def test_identical_sets_give_identical_set_outputs():
    schema = FieldSchema.from_cardinalities(CARDS)
    model = Model(schema, ModelSpec(interaction="dcnv2", num_sets=2, embedding_size=3,
                                    cross_layers=1, mlp=(4, 3), init_scale=0.5), seed=1)
    for name in model.store.names():
        if name.startswith(("emb/0", "cross/0", "proj/0")):
            model.store[name.replace("/0", "/1", 1)][...] = model.store[name]
    x = sample(np.random.default_rng(1), CARDS, 20)
    t = Tape(model.store)
    assert np.array_equal(model.set_output(t, x, 0).value, model.set_output(t, x, 1).value)


def test_out_of_range_index():
    model = Model(FieldSchema.from_cardinalities(CARDS), ModelSpec(interaction="fm", mlp=(3,)))
    with pytest.raises(DataError):
        model.logits(np.array([[5, 0, 0, 0]]))


@pytest.mark.parametrize("kind", INTERACTIONS)
@pytest.mark.parametrize("m", [1, 2])
def test_model_gradients_match_finite_differences(kind, m):
    schema = FieldSchema.from_cardinalities(CARDS)
    for seed in range(3):
        spec = ModelSpec(interaction=kind, embedding_size=6 if kind == "ffm" else 4, num_sets=m,
                         cross_layers=2, mlp=(5, 4), init_scale=0.5,
                         unitary_reg_weight=0.7 if kind == "dcnv2" else 0.0)
        model = Model(schema, spec, seed=seed)
        rng = np.random.default_rng(seed + 50)
        perturb_offsets(model, rng)
        x, y = sample(rng, CARDS, 7), rng.integers(0, 2, 7)
        assert model_gradient_error(model, x, y, seed=seed) <= 1e-5


def test_shared_interaction_uses_one_module():
    schema = FieldSchema.from_cardinalities(CARDS)
    model = Model(schema, ModelSpec(interaction="dcnv2", num_sets=3, embedding_size=2,
                                    cross_layers=1, mlp=(4, 3), me_shared_interaction=True))
    names = model.store.names()
    assert "cross/0/0/W" in names and "cross/1/0/W" not in names
    assert "emb/2/0" in names


# -- unitary regularizer ---------------------------------------------------------

def _orthogonal(k, rng):
    q, r = np.linalg.qr(rng.standard_normal((k, k)))
    return q * np.sign(np.diag(r))


def test_unitary_reg_examples():
    q = _orthogonal(4, np.random.default_rng(0))
    loss, _, _ = unitary_reg_loss({(0, 1): 2 * q}, {(0, 1): 4.0})
    assert loss == pytest.approx(0.0, abs=1e-12)
    loss, _, _ = unitary_reg_loss({(0, 0): np.eye(5)}, {(0, 0): 0.0})
    assert loss == pytest.approx(5.0)


def test_unitary_reg_optimal_lambda_scan():
    w = np.random.default_rng(1).standard_normal((4, 4))
    star = np.trace(w.T @ w) / 4
    grid = np.linspace(star - 2, star + 2, 4001)
    vals = [unitary_reg_loss({(0, 0): w}, {(0, 0): lam})[0] for lam in grid]
    assert abs(grid[int(np.argmin(vals))] - star) <= 1e-3
    _, _, gl = unitary_reg_loss({(0, 0): w}, {(0, 0): star})
    assert abs(gl[(0, 0)]) <= 1e-10


def test_unitary_reg_block_form_matches_dict_form():
    rng = np.random.default_rng(2)
    n, k = 3, 2
    w = rng.standard_normal((n * k, n * k))
    lam = rng.random((n, n))
    loss, dw, dl = unitary_reg_terms(w, lam)
    blocks = {(i, j): projection_block(w, n, i, j) for i in range(n) for j in range(n)}
    ref, gw, gl = unitary_reg_loss(blocks, {key: lam[key] for key in blocks})
    assert loss == pytest.approx(ref, rel=1e-12)
    for (i, j), g in gw.items():
        assert np.allclose(projection_block(dw, n, i, j), g)
        assert dl[i, j] == pytest.approx(gl[(i, j)])


def test_zero_penalty_preserves_sub_embedding_ia():
    rng = np.random.default_rng(3)
    e = rng.standard_normal((30, 4))
    w = 1.7 * _orthogonal(4, rng)
    loss, _, _ = unitary_reg_loss({(0, 1): w}, {(0, 1): 1.7 ** 2})
    assert loss <= 1e-20
    assert information_abundance(e @ w.T) == pytest.approx(information_abundance(e), rel=1e-9)


# -- linear-interaction equivalences ---------------------------------------------

@pytest.mark.parametrize("build", [concat_dnn, projected_dnn, block_diagonal_dcnv2])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_linear_me_has_constructed_se_twin(build, seed):
    assert output_gap(build, seed) <= 1e-9


def test_constructed_equivalences_are_not_trivial():
    # relu projections break the projected-DNN construction
    kw = {"me_nonlinear_projection": True, "projection_width": 7}
    me, se = model_pair("dnn_concat", kw, dict(kw, projection_activation="identity"))
    x = sample(np.random.default_rng(3), CARDS, 100)
    assert np.abs(me.logits(x) - se.logits(x)).max() > 1e-6
