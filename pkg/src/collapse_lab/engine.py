"""Reverse-mode gradients over a small closed set of batched primitives,
plus the BCE loss, Adam/SGD updates and slot checkpoints.

Per-sample quantities are ``(B, width)`` arrays. A :class:`Tape` records each
primitive as it runs; :meth:`Tape.backward` replays the records in reverse and
accumulates parameter gradients into the :class:`ParamStore`.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import DataError, NumericalError, ShapeError, StateError
from .fileio import atomic_write_json
from .linalg import read_matrix, write_matrix

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class Slot:
    value: np.ndarray
    grad: np.ndarray
    m: np.ndarray
    v: np.ndarray
    trainable: bool = True
    is_embedding: bool = False


class ParamStore:
    """Named parameter matrices with gradient accumulators and Adam moments."""

    def __init__(self):
        self.slots: dict[str, Slot] = {}
        self.step = 0

    def add(self, name, value, trainable=True, is_embedding=False):
        if name in self.slots:
            raise ValueError(f"duplicate slot {name!r}")
        value = np.array(value, dtype=np.float64)
        if value.ndim != 2:
            raise ShapeError(f"slot {name!r} must be 2-D, got {value.shape}")
        self.slots[name] = Slot(value, np.zeros_like(value), np.zeros_like(value),
                                np.zeros_like(value), trainable, is_embedding)
        return self.slots[name]

    def __getitem__(self, name):
        return self.slots[name].value

    def __contains__(self, name):
        return name in self.slots

    def names(self):
        return list(self.slots)

    def zero_grads(self):
        for s in self.slots.values():
            s.grad[...] = 0.0

    def snapshot(self):
        return {k: s.value.copy() for k, s in self.slots.items()}

    def restore(self, values):
        for k, v in values.items():
            self.slots[k].value[...] = v

    def n_params(self):
        return sum(s.value.size for s in self.slots.values())


class Node:
    __slots__ = ("value", "grad", "backward_fn", "parents")

    def __init__(self, value, parents=(), backward_fn=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn

    @property
    def shape(self):
        return self.value.shape

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g


def one_hot_rows(indices, n_rows):
    """Sparse ``(n_rows, B)`` matrix with a 1 at ``(indices[b], b)``."""
    b = len(indices)
    return sp.csr_matrix((np.ones(b), (indices, np.arange(b))), shape=(n_rows, b))


def scatter_rows(indices, grads, n_rows):
    """Sum ``grads`` rows into an ``n_rows``-row matrix at ``indices`` (deterministic)."""
    return np.asarray(one_hot_rows(np.asarray(indices), n_rows) @ grads)


class Tape:
    """Records primitives for one forward pass over a batch."""

    def __init__(self, store):
        self.store = store
        self.records = []
        self._backward_done = False

    def _record(self, value, parents, backward_fn):
        node = Node(value, parents, backward_fn)
        self.records.append(node)
        return node

    # leaves -------------------------------------------------------------
    def param(self, name):
        slot = self.store.slots[name]

        def back(g):
            if slot.trainable:
                slot.grad += g

        return self._record(slot.value, (), back)

    def constant(self, value):
        return Node(np.asarray(value, dtype=np.float64))

    # primitives ---------------------------------------------------------
    def embedding_lookup(self, name, indices):
        slot = self.store.slots[name]
        idx = np.asarray(indices)
        n_rows = slot.value.shape[0]
        if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
            raise DataError(f"index out of range for {name!r} with {n_rows} rows")

        def back(g):
            if slot.trainable:
                slot.grad += scatter_rows(idx, g, n_rows)

        return self._record(slot.value[idx], (), back)

    def matmul_affine(self, x, w, b=None):
        """``x @ w.T + b`` with ``w`` of shape ``(out, in)`` and ``b`` of shape ``(1, out)``."""
        if x.shape[1] != w.shape[1]:
            raise ShapeError(f"affine input width {x.shape[1]} does not match weight {w.shape}")
        if b is not None and b.shape != (1, w.shape[0]):
            raise ShapeError(f"bias shape {b.shape} does not match weight {w.shape}")
        out = x.value @ w.value.T
        if b is not None:
            out = out + b.value

        def back(g):
            x._accumulate(g @ w.value)
            w._accumulate(g.T @ x.value)
            if b is not None:
                b._accumulate(g.sum(axis=0, keepdims=True))

        parents = (x, w) if b is None else (x, w, b)
        return self._record(out, parents, back)

    def relu(self, x):
        mask = x.value > 0.0

        def back(g):
            x._accumulate(g * mask)

        return self._record(np.where(mask, x.value, 0.0), (x,), back)

    def elementwise_mul(self, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"elementwise product of {a.shape} and {b.shape}")

        def back(g):
            a._accumulate(g * b.value)
            b._accumulate(g * a.value)

        return self._record(a.value * b.value, (a, b), back)

    def dot(self, a, b):
        """Row-wise inner product, ``(B, K), (B, K) -> (B, 1)``."""
        if a.shape != b.shape:
            raise ShapeError(f"dot of {a.shape} and {b.shape}")

        def back(g):
            a._accumulate(g * b.value)
            b._accumulate(g * a.value)

        return self._record(np.sum(a.value * b.value, axis=1, keepdims=True), (a, b), back)

    def sum(self, nodes):
        """Elementwise sum of equally shaped nodes, accumulated left to right."""
        nodes = list(nodes)
        shape = nodes[0].shape
        for n in nodes[1:]:
            if n.shape != shape:
                raise ShapeError(f"sum of {shape} and {n.shape}")
        out = nodes[0].value.copy()
        for n in nodes[1:]:
            out = out + n.value

        def back(g):
            for n in nodes:
                n._accumulate(g)

        return self._record(out, tuple(nodes), back)

    def mean(self, x):
        """Mean over all entries, giving a ``(1, 1)`` node."""
        count = x.value.size

        def back(g):
            x._accumulate(np.full(x.shape, g.item() / count))

        return self._record(np.array([[x.value.mean()]]), (x,), back)

    def concat(self, nodes):
        nodes = list(nodes)
        if len({n.shape[0] for n in nodes}) != 1:
            raise ShapeError("concat needs equal batch sizes")
        widths = [n.shape[1] for n in nodes]
        bounds = np.cumsum([0] + widths)

        def back(g):
            for n, lo, hi in zip(nodes, bounds[:-1], bounds[1:]):
                n._accumulate(g[:, lo:hi])

        return self._record(np.concatenate([n.value for n in nodes], axis=1), tuple(nodes), back)

    def scalar_scale(self, x, c):
        def back(g):
            x._accumulate(g * c)

        return self._record(x.value * c, (x,), back)

    def bce(self, logits, labels):
        """Per-sample binary cross-entropy on logits, ``(B, 1) -> (B, 1)``."""
        z = logits.value
        y = np.asarray(labels, dtype=np.float64).reshape(z.shape)
        loss, grad = bce_loss(z, y)

        def back(g):
            logits._accumulate(g * grad)

        return self._record(loss, (logits,), back)

    # reverse pass -------------------------------------------------------
    def backward(self, output, seed_grad=1.0):
        if not self.records:
            raise StateError("backward called before any forward primitive was recorded")
        if self._backward_done:
            raise StateError("backward already ran on this tape")
        output._accumulate(np.full(output.shape, float(seed_grad)))
        for node in reversed(self.records):
            if node.grad is None or node.backward_fn is None:
                continue
            node.backward_fn(node.grad)
        self._backward_done = True


def bce_loss(z, y):
    """Stable binary cross-entropy on logits and its derivative ``sigmoid(z) - y``."""
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    loss = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return loss, sigmoid(z) - y


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    ez = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))


def _check_finite(store):
    for name, s in store.slots.items():
        if s.trainable and not np.all(np.isfinite(s.grad)):
            raise NumericalError(f"non-finite gradient in slot {name!r}")


def adam_step(store, lr=1e-3, beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS,
              weight_decay=0.0, decay_embeddings=True):
    """One Adam update with bias correction; weight decay is added to the gradient."""
    _check_finite(store)
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for s in store.slots.values():
        if not s.trainable:
            continue
        g = s.grad
        if weight_decay and (decay_embeddings or not s.is_embedding):
            g = g + weight_decay * s.value
        s.m *= beta1
        s.m += (1.0 - beta1) * g
        s.v *= beta2
        s.v += (1.0 - beta2) * g * g
        s.value -= lr * (s.m / c1) / (np.sqrt(s.v / c2) + eps)


def sgd_full_batch_step(store, lr):
    _check_finite(store)
    store.step += 1
    for s in store.slots.values():
        if s.trainable:
            s.value -= lr * s.grad


# -- finite differences --------------------------------------------------------

def finite_difference(loss_fn, store, coords, rel_step=1e-5):
    """Central differences of ``loss_fn()`` at ``coords`` = [(slot, (r, c)), ...]."""
    out = []
    for name, (r, c) in coords:
        val = store.slots[name].value
        orig = val[r, c]
        h = rel_step * (1.0 + abs(orig))
        val[r, c] = orig + h
        up = loss_fn()
        val[r, c] = orig - h
        down = loss_fn()
        val[r, c] = orig
        out.append((up - down) / (2.0 * h))
    return np.array(out)


# -- checkpoints ---------------------------------------------------------------

def _slot_file(name):
    return name.replace("/", "__") + ".txt"


def save_checkpoint(store, directory, extra=None):
    """Write every slot as a matrix text file plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    slots = {}
    for name, s in store.slots.items():
        fname = _slot_file(name)
        write_matrix(directory / fname, s.value)
        slots[name] = {"file": fname, "shape": list(s.value.shape)}
    manifest = {"step": store.step, "slots": slots}
    if extra:
        manifest.update(extra)
    atomic_write_json(directory / "manifest.json", manifest)
    return directory / "manifest.json"


def load_manifest(path):
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    if "slots" not in manifest:
        raise DataError(f"manifest {path} has no 'slots' section")
    return manifest


def load_slot(manifest_path, manifest, name):
    entry = manifest["slots"].get(name)
    if entry is None:
        raise DataError(f"manifest has no slot {name!r}")
    value = read_matrix(Path(manifest_path).parent / entry["file"])
    if list(value.shape) != list(entry["shape"]):
        raise DataError(f"slot {name!r}: file shape {value.shape} != manifest {entry['shape']}")
    return value


def load_checkpoint(manifest_path, store=None):
    manifest = load_manifest(manifest_path)
    if store is None:
        store = ParamStore()
    for name in manifest["slots"]:
        value = load_slot(manifest_path, manifest, name)
        if name in store:
            if store[name].shape != value.shape:
                raise DataError(f"slot {name!r}: checkpoint shape {value.shape} != model {store[name].shape}")
            store.slots[name].value[...] = value
        else:
            store.add(name, value)
    store.step = int(manifest.get("step", 0))
    return store
