"""Embedding tables, feature-interaction modules and the multi-embedding wrapper.

A model maps one categorical index per field to a logit::

    e_i^(m) = E_i^(m)[x_i]                        (lookup, per embedding set m)
    h^(m)   = P^(m)(I^(m)(e_1^(m), ..., e_N^(m)))  (interaction, optional projection)
    h       = mean_m h^(m)                         (or concatenation)
    logit   = MLP(h)

``M == 1`` is the ordinary single-embedding model.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .engine import ParamStore, Tape
from .errors import ConfigError, ShapeError

INTERACTIONS = ("dnn_concat", "fm", "fwfm", "ffm", "ipnn", "dcnv2")
# interactions with no non-linearity of their own in the sense of the ME guard
LINEAR_INTERACTIONS = ("dnn_concat", "fm", "fwfm", "ipnn")
SCALAR_INTERACTIONS = ("fm", "fwfm", "ffm")


@dataclass
class FieldSchema:
    names: list
    cardinalities: list

    def __post_init__(self):
        self.names = [str(n) for n in self.names]
        self.cardinalities = [int(c) for c in self.cardinalities]
        if len(self.names) != len(self.cardinalities):
            raise ConfigError("field names and cardinalities differ in length")
        if len(self.names) < 2:
            raise ConfigError("a schema needs at least two fields")
        if any(c < 1 for c in self.cardinalities):
            raise ConfigError("every field cardinality must be >= 1")

    @property
    def n_fields(self):
        return len(self.names)

    @classmethod
    def from_cardinalities(cls, cards):
        return cls([f"f{i}" for i in range(len(cards))], list(cards))

    def to_json(self):
        return {"fields": [{"name": n, "cardinality": c}
                           for n, c in zip(self.names, self.cardinalities)]}

    @classmethod
    def from_json(cls, obj):
        try:
            fs = obj["fields"]
            return cls([f["name"] for f in fs], [f["cardinality"] for f in fs])
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed schema: {exc}") from exc


@dataclass
class ModelSpec:
    interaction: str = "dcnv2"
    embedding_size: int = 10
    num_sets: int = 1
    cross_layers: int = 4
    mlp: tuple = (400, 400)
    me_shared_interaction: bool = False
    unitary_reg_weight: float = 0.0
    # None resolves to True for M > 1 and False for M == 1
    me_nonlinear_projection: bool | None = None
    projection_activation: str = "relu"
    projection_width: int | None = None
    me_combine: str = "mean"
    init_scale: float = 0.01

    def __post_init__(self):
        self.mlp = tuple(int(h) for h in self.mlp)
        if self.me_nonlinear_projection is None:
            self.me_nonlinear_projection = self.num_sets > 1

    @property
    def is_linear_me(self):
        """True when M > 1 sets would collapse into one equivalent wider model."""
        if self.num_sets <= 1 or self.interaction not in LINEAR_INTERACTIONS:
            return False
        return not self.me_nonlinear_projection or self.projection_activation != "relu"

    def validate(self, schema=None, strict=True):
        if self.interaction not in INTERACTIONS:
            raise ConfigError(f"unknown interaction {self.interaction!r}; choose from {INTERACTIONS}")
        if self.embedding_size < 1 or self.num_sets < 1:
            raise ConfigError("embedding_size and num_sets must be >= 1")
        if self.interaction == "dcnv2" and self.cross_layers < 1:
            raise ConfigError("dcnv2 needs at least one cross layer")
        if self.unitary_reg_weight < 0:
            raise ConfigError("unitary_reg_weight must be >= 0")
        if self.projection_activation not in ("relu", "identity"):
            raise ConfigError(f"unknown projection activation {self.projection_activation!r}")
        if self.me_combine not in ("mean", "concat"):
            raise ConfigError(f"unknown me_combine {self.me_combine!r}")
        if schema is not None and self.interaction == "ffm":
            n = schema.n_fields
            if self.embedding_size % (n - 1):
                raise ConfigError(
                    f"ffm needs embedding_size divisible by N-1 = {n - 1}, got {self.embedding_size}")
        if strict and self.is_linear_me:
            raise ConfigError(
                f"{self.interaction} with {self.num_sets} embedding sets and no non-linear "
                "projection is equivalent to a single embedding; enable me_nonlinear_projection")
        return self

    def to_json(self):
        d = asdict(self)
        d["mlp"] = list(self.mlp)
        return d

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


# -- interaction modules -------------------------------------------------------

def _prepare(embs, tape):
    if tape is not None:
        return embs, tape, False
    tape = Tape(ParamStore())
    nodes = [tape.constant(np.atleast_2d(np.asarray(e, dtype=np.float64))) for e in embs]
    return nodes, tape, True


def _finish(node, plain):
    if not plain:
        return node
    v = node.value
    return v[0] if v.shape[0] == 1 else v


def _param_node(p, tape, plain):
    if plain:
        return tape.constant(np.atleast_2d(np.asarray(p, dtype=np.float64)))
    return p


def pair_index(n):
    return [(i, j) for i in range(n) for j in range(i + 1, n)]


def interact_fm(embs, tape=None):
    """Sum of all pairwise inner products ``sum_{i<j} e_i . e_j``."""
    embs, tape, plain = _prepare(embs, tape)
    dots = [tape.dot(embs[i], embs[j]) for i, j in pair_index(len(embs))]
    return _finish(tape.sum(dots), plain)


def interact_fwfm(embs, r, tape=None):
    """Field-weighted FM: ``sum_{i<j} r_ij e_i . e_j``; ``r`` is ``(1, P)`` in
    lexicographic pair order."""
    embs, tape, plain = _prepare(embs, tape)
    r = _param_node(r, tape, plain)
    pairs = pair_index(len(embs))
    if r.shape != (1, len(pairs)):
        raise ShapeError(f"fwfm weights must have shape (1, {len(pairs)}), got {r.shape}")
    dots = tape.concat([tape.dot(embs[i], embs[j]) for i, j in pairs])
    return _finish(tape.matmul_affine(dots, r), plain)


def ffm_slice_matrix(k, n_fields, slot):
    """Constant ``(w, K)`` selector for the ``slot``-th block of width ``K/(N-1)``."""
    w = k // (n_fields - 1)
    sel = np.zeros((w, k))
    sel[np.arange(w), slot * w + np.arange(w)] = 1.0
    return sel


def ffm_slot(i, j):
    """Position of the block field ``i`` uses against field ``j`` (``i != j``)."""
    return j if j < i else j - 1


def interact_ffm(embs, tape=None):
    """Field-aware FM: ``sum_{i<j} e_i^{->j} . e_j^{->i}`` over column blocks."""
    embs, tape, plain = _prepare(embs, tape)
    n = len(embs)
    k = embs[0].shape[1]
    if n < 2 or k % (n - 1):
        raise ConfigError(f"ffm needs width divisible by N-1 = {n - 1}, got {k}")
    sels = [tape.constant(ffm_slice_matrix(k, n, s)) for s in range(n - 1)]
    dots = []
    for i, j in pair_index(n):
        a = tape.matmul_affine(embs[i], sels[ffm_slot(i, j)])
        b = tape.matmul_affine(embs[j], sels[ffm_slot(j, i)])
        dots.append(tape.dot(a, b))
    return _finish(tape.sum(dots), plain)


def interact_ipnn(embs, tape=None):
    """Pairwise inner products (lexicographic) followed by the raw embeddings."""
    embs, tape, plain = _prepare(embs, tape)
    dots = [tape.dot(embs[i], embs[j]) for i, j in pair_index(len(embs))]
    return _finish(tape.concat(dots + list(embs)), plain)


def interact_dnn_concat(embs, tape=None):
    embs, tape, plain = _prepare(embs, tape)
    return _finish(tape.concat(embs), plain)


def interact_dcnv2(embs, layers, tape=None):
    """Stacked cross layers ``x_{l+1} = x_0 * (W_l x_l + b_l) + x_l``.

    ``layers`` is a list of ``(W, b)`` with ``W`` of shape ``(NK, NK)``; its
    block at row-block ``i``, column-block ``j`` is ``W_{j->i}``.
    """
    embs, tape, plain = _prepare(embs, tape)
    x0 = tape.concat(embs)
    x = x0
    for w, b in layers:
        w = _param_node(w, tape, plain)
        b = _param_node(b, tape, plain)
        x = tape.sum([tape.elementwise_mul(x0, tape.matmul_affine(x, w, b)), x])
    return _finish(x, plain)


def interaction_width(kind, n, k):
    if kind in SCALAR_INTERACTIONS:
        return 1
    if kind == "ipnn":
        return n * (n - 1) // 2 + n * k
    return n * k


def projection_block(w, n_fields, src, dst):
    """``W_{src->dst}``: the ``K x K`` block at row-block ``dst``, column-block ``src``."""
    k = w.shape[0] // n_fields
    return w[dst * k:(dst + 1) * k, src * k:(src + 1) * k]


# -- unitary regulariser -------------------------------------------------------

def unitary_reg_terms(w, lambdas):
    """Penalty ``sum_{i,j} ||W_{i->j}^T W_{i->j} - lambda_ij I||_F^2`` over the
    blocks of one ``NK x NK`` cross weight.

    ``lambdas[i, j]`` pairs with ``W_{i->j}``. Returns ``(loss, dW, dlambda)``.
    """
    n = lambdas.shape[0]
    k = w.shape[0] // n
    blocks = w.reshape(n, k, n, k)              # blocks[dst, :, src, :] = W_{src->dst}
    gram = np.einsum("akcl,akcm->aclm", blocks, blocks)
    lam = lambdas.T                              # lam[dst, src]
    resid = gram - lam[:, :, None, None] * np.eye(k)
    loss = float(np.sum(resid * resid))
    d_blocks = 4.0 * np.einsum("akcl,aclm->akcm", blocks, resid)
    d_lam = -2.0 * np.trace(resid, axis1=2, axis2=3).T
    return loss, d_blocks.reshape(w.shape), d_lam


def unitary_reg_loss(projections, lambdas):
    """Same penalty for an explicit ``{(i, j): W_{i->j}}`` map.

    Returns ``(loss, {(i, j): dW}, {(i, j): dlambda})``.
    """
    loss = 0.0
    gw, gl = {}, {}
    for key in sorted(projections):
        w = np.asarray(projections[key], dtype=np.float64)
        lam = float(lambdas[key])
        r = w.T @ w - lam * np.eye(w.shape[1])
        loss += float(np.sum(r * r))
        gw[key] = 4.0 * w @ r
        gl[key] = -2.0 * float(np.trace(r))
    return loss, gw, gl


# -- model ---------------------------------------------------------------------

def _rng(seed, *path):
    return np.random.default_rng(np.random.SeedSequence([int(seed), *path]))


class Model:
    """Parameters plus forward pass for one :class:`ModelSpec` over a schema."""

    def __init__(self, schema, spec, seed=0, strict=True):
        spec.validate(schema, strict=strict)
        self.schema = schema
        self.spec = spec
        self.seed = int(seed)
        self.store = ParamStore()
        n, k, m = schema.n_fields, spec.embedding_size, spec.num_sets
        self.n_fields = n
        self.inter_width = interaction_width(spec.interaction, n, k)
        self.proj_width = spec.projection_width or self.inter_width
        self.n_interaction_sets = 1 if spec.me_shared_interaction else m

        for s in range(m):
            for i, d in enumerate(schema.cardinalities):
                rng = _rng(seed, 1, s, i)
                self.store.add(self.emb_name(s, i), spec.init_scale * rng.standard_normal((d, k)),
                               is_embedding=True)

        rng = _rng(seed, 2)
        nk = n * k
        for s in range(self.n_interaction_sets):
            if spec.interaction == "fwfm":
                self.store.add(f"fwfm/{s}/r", np.ones((1, n * (n - 1) // 2)))
            if spec.interaction == "dcnv2":
                for layer in range(spec.cross_layers):
                    w = rng.standard_normal((nk, nk)) / np.sqrt(nk)
                    self.store.add(self.cross_name(s, layer, "W"), w)
                    self.store.add(self.cross_name(s, layer, "b"), np.zeros((1, nk)))
                    if spec.unitary_reg_weight > 0:
                        blocks = w.reshape(n, k, n, k)
                        # lambda starts at its optimum trace(W^T W) / K for each block
                        lam = np.einsum("akcl,akcl->ca", blocks, blocks) / k
                        self.store.add(self.lambda_name(s, layer), lam)
            if spec.me_nonlinear_projection:
                pw, iw = self.proj_width, self.inter_width
                self.store.add(f"proj/{s}/W", rng.standard_normal((pw, iw)) * np.sqrt(2.0 / iw))
                self.store.add(f"proj/{s}/b", np.zeros((1, pw)))

        width = self.proj_width if spec.me_nonlinear_projection else self.inter_width
        if spec.me_combine == "concat":
            width *= m
        hidden = list(spec.mlp[:-1] if spec.me_nonlinear_projection else spec.mlp)
        self.mlp_sizes = hidden + [1]
        for layer, out in enumerate(self.mlp_sizes):
            scale = np.sqrt(2.0 / width) if layer < len(hidden) else np.sqrt(1.0 / width)
            self.store.add(f"mlp/{layer}/W", rng.standard_normal((out, width)) * scale)
            self.store.add(f"mlp/{layer}/b", np.zeros((1, out)))
            width = out

    # slot names
    @staticmethod
    def emb_name(s, i):
        return f"emb/{s}/{i}"

    @staticmethod
    def cross_name(s, layer, part):
        return f"cross/{s}/{layer}/{part}"

    @staticmethod
    def lambda_name(s, layer):
        return f"lambda/{s}/{layer}"

    def _iset(self, m):
        return 0 if self.spec.me_shared_interaction else m

    # forward -----------------------------------------------------------
    def set_output(self, tape, x, m):
        """``h^(m)``: interaction (and projection) output of embedding set ``m``."""
        spec = self.spec
        s = self._iset(m)
        embs = [tape.embedding_lookup(self.emb_name(m, i), x[:, i]) for i in range(self.n_fields)]
        kind = spec.interaction
        if kind == "fm":
            h = interact_fm(embs, tape=tape)
        elif kind == "fwfm":
            h = interact_fwfm(embs, tape.param(f"fwfm/{s}/r"), tape=tape)
        elif kind == "ffm":
            h = interact_ffm(embs, tape=tape)
        elif kind == "ipnn":
            h = interact_ipnn(embs, tape=tape)
        elif kind == "dnn_concat":
            h = interact_dnn_concat(embs, tape=tape)
        else:
            layers = [(tape.param(self.cross_name(s, l, "W")), tape.param(self.cross_name(s, l, "b")))
                      for l in range(spec.cross_layers)]
            h = interact_dcnv2(embs, layers, tape=tape)
        if spec.me_nonlinear_projection:
            h = tape.matmul_affine(h, tape.param(f"proj/{s}/W"), tape.param(f"proj/{s}/b"))
            if spec.projection_activation == "relu":
                h = tape.relu(h)
        return h

    def forward(self, tape, x):
        x = np.asarray(x)
        if x.ndim != 2 or x.shape[1] != self.n_fields:
            raise ShapeError(f"expected a (B, {self.n_fields}) index array, got {x.shape}")
        m = self.spec.num_sets
        hs = [self.set_output(tape, x, s) for s in range(m)]
        if m == 1:
            h = hs[0]
        elif self.spec.me_combine == "concat":
            h = tape.concat(hs)
        else:
            h = tape.scalar_scale(tape.sum(hs), 1.0 / m)
        for layer in range(len(self.mlp_sizes)):
            h = tape.matmul_affine(h, tape.param(f"mlp/{layer}/W"), tape.param(f"mlp/{layer}/b"))
            if layer < len(self.mlp_sizes) - 1:
                h = tape.relu(h)
        return h

    def reg_loss(self, accumulate=False):
        """Unitary penalty summed over sets and cross layers, unweighted.

        With ``accumulate`` the weighted gradients are added to the store.
        """
        spec = self.spec
        if spec.unitary_reg_weight <= 0 or spec.interaction != "dcnv2":
            return 0.0
        total = 0.0
        for s in range(self.n_interaction_sets):
            for layer in range(spec.cross_layers):
                w_slot = self.store.slots[self.cross_name(s, layer, "W")]
                l_slot = self.store.slots[self.lambda_name(s, layer)]
                loss, dw, dl = unitary_reg_terms(w_slot.value, l_slot.value)
                total += loss
                if accumulate:
                    w_slot.grad += spec.unitary_reg_weight * dw
                    l_slot.grad += spec.unitary_reg_weight * dl
        return total

    def loss(self, x, y, backward=False):
        """Mean BCE plus weighted unitary penalty; optionally back-propagates."""
        tape = Tape(self.store)
        logits = self.forward(tape, x)
        out = tape.mean(tape.bce(logits, y))
        bce = float(out.value[0, 0])
        reg = self.reg_loss(accumulate=backward)
        if backward:
            tape.backward(out)
        return bce + self.spec.unitary_reg_weight * reg

    def logits(self, x, batch_size=8192):
        x = np.asarray(x)
        out = []
        for lo in range(0, len(x), batch_size):
            tape = Tape(self.store)
            out.append(self.forward(tape, x[lo:lo + batch_size]).value[:, 0])
        return np.concatenate(out) if out else np.zeros(0)

    # views for diagnostics ---------------------------------------------
    def embedding_tables(self, m=0):
        return [self.store[self.emb_name(m, i)] for i in range(self.n_fields)]

    def concatenated_tables(self):
        """Per field, all embedding sets side by side (``D_i x MK``)."""
        return [np.hstack([self.store[self.emb_name(m, i)] for m in range(self.spec.num_sets)])
                for i in range(self.n_fields)]

    def projection_blocks(self, m=0, layer=0):
        """``{(i, j): W_{i->j}}`` from a cross layer; empty for non-dcnv2 models."""
        if self.spec.interaction != "dcnv2":
            return {}
        w = self.store[self.cross_name(self._iset(m), layer, "W")]
        n = self.n_fields
        return {(i, j): projection_block(w, n, i, j) for i in range(n) for j in range(n)}
