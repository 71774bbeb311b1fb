"""Training loops, AUC, early stopping and the three-field toy experiment."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .data import batches, gen_toy
from .engine import (ADAM_BETA1, ADAM_BETA2, ADAM_EPS, ParamStore, adam_step, load_checkpoint,
                     one_hot_rows, save_checkpoint, sgd_full_batch_step, sigmoid)
from .errors import ConfigError, MetricError, NumericalError, TrainingAborted
from .metrics import information_abundance


def auc(scores, labels):
    """Mann-Whitney AUC; tied scores share their average rank."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise MetricError("scores and labels differ in length")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both classes present")
    ranks = rankdata(s, method="average")
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    weight_decay: float = 1e-6
    decay_embeddings: bool = True
    batch_size: int = 2048
    max_epochs: int = 20
    patience: int = 3
    metric_every: int = 0
    # keep the best-validation parameters on disk instead of in memory
    best_checkpoint_dir: str | None = None
    seed: int = 0
    adam_beta1: float = ADAM_BETA1
    adam_beta2: float = ADAM_BETA2
    adam_eps: float = ADAM_EPS

    def validate(self):
        if self.optimizer not in ("adam", "sgd_full"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if not self.lr >= 0:
            raise ConfigError("lr must be >= 0")
        if self.batch_size < 1 or self.max_epochs < 1 or self.metric_every < 0:
            raise ConfigError("batch_size and max_epochs must be >= 1, metric_every >= 0")
        return self

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


class EarlyStopping:
    """Stop once the monitored score has not improved for ``patience`` epochs."""

    def __init__(self, patience=3):
        self.patience = patience
        self.best = -np.inf
        self.best_epoch = None
        self.bad_epochs = 0

    def update(self, epoch, score):
        """Record ``score``; returns ``(improved, should_stop)``."""
        if score > self.best:
            self.best = score
            self.best_epoch = epoch
            self.bad_epochs = 0
            return True, False
        self.bad_epochs += 1
        return False, self.bad_epochs >= self.patience


@dataclass
class RunRecord:
    epochs: list = field(default_factory=list)
    ia_trajectory: list = field(default_factory=list)
    best_epoch: int | None = None
    best_val_auc: float | None = None
    test_auc: float | None = None
    steps: int = 0
    config: dict = field(default_factory=dict)
    seed: int = 0
    wall_clock_seconds: float = 0.0

    def to_json(self):
        return asdict(self)


def ia_snapshot(model, step):
    rows = []
    for m in range(model.spec.num_sets):
        for i, table in enumerate(model.embedding_tables(m)):
            rows.append({"step": step, "set": m, "field": i, "ia": information_abundance(table)})
    return rows


def _slot_norms(store):
    return {k: float(np.linalg.norm(s.value)) for k, s in store.slots.items()}


class _BestKeeper:
    """Best-validation parameters, held in memory or spilled to a checkpoint."""

    def __init__(self, store, directory=None):
        self.store = store
        self.directory = Path(directory) if directory else None
        self.save()

    def save(self):
        if self.directory is None:
            self.values = self.store.snapshot()
        else:
            self.manifest = save_checkpoint(self.store, self.directory)

    def restore(self):
        if self.directory is None:
            self.store.restore(self.values)
        else:
            step = self.store.step
            load_checkpoint(self.manifest, self.store)
            self.store.step = step


def train(model, train_ds, val_ds, test_ds, cfg, config_echo=None):
    """Fit ``model`` with early stopping on validation AUC.

    The best-validation parameters are restored before the single test
    evaluation.
    """
    cfg.validate()
    store = model.store
    record = RunRecord(config=config_echo or {"train": asdict(cfg)}, seed=cfg.seed)
    t0 = time.perf_counter()
    stopper = EarlyStopping(cfg.patience)
    keeper = _BestKeeper(store, cfg.best_checkpoint_dir)
    step = 0
    batch_size = len(train_ds) if cfg.optimizer == "sgd_full" else cfg.batch_size
    if cfg.metric_every:
        record.ia_trajectory.extend(ia_snapshot(model, 0))
    for epoch in range(1, cfg.max_epochs + 1):
        losses, sizes = [], []
        for batch in batches(train_ds, batch_size, epoch_seed=cfg.seed * 1000003 + epoch):
            store.zero_grads()
            loss = model.loss(batch.x, batch.y, backward=True)
            if not np.isfinite(loss):
                raise TrainingAborted(
                    f"non-finite loss at step {step + 1}",
                    {"step": step + 1, "epoch": epoch, "slot_norms": _slot_norms(store)})
            try:
                if cfg.optimizer == "adam":
                    adam_step(store, lr=cfg.lr, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2,
                              eps=cfg.adam_eps, weight_decay=cfg.weight_decay,
                              decay_embeddings=cfg.decay_embeddings)
                else:
                    sgd_full_batch_step(store, cfg.lr)
            except NumericalError as exc:
                raise TrainingAborted(str(exc), {"step": step + 1, "epoch": epoch,
                                                 "slot_norms": _slot_norms(store)}) from exc
            step += 1
            losses.append(loss)
            sizes.append(len(batch))
            if cfg.metric_every and step % cfg.metric_every == 0:
                record.ia_trajectory.extend(ia_snapshot(model, step))
        val_auc = auc(model.logits(val_ds.x), val_ds.y)
        train_loss = float(np.dot(losses, sizes) / np.sum(sizes))
        record.epochs.append({"epoch": epoch, "train_loss": train_loss, "val_auc": val_auc})
        improved, stop = stopper.update(epoch, val_auc)
        if improved:
            keeper.save()
        if stop:
            break
    keeper.restore()
    record.best_epoch = stopper.best_epoch
    record.best_val_auc = float(stopper.best)
    record.test_auc = auc(model.logits(test_ds.x), test_ds.y)
    record.steps = step
    record.wall_clock_seconds = time.perf_counter() - t0
    return record


# -- toy experiment ------------------------------------------------------------

def toy_schedule(steps):
    """``0, 1, 2, 5, 10, 20, 50, ...`` up to and including ``steps``."""
    out = [0]
    base = 1
    while base <= steps:
        for mult in (1, 2, 5):
            if base * mult <= steps:
                out.append(base * mult)
        base *= 10
    if out[-1] != steps:
        out.append(steps)
    return out


def toy_store(d3, seed, embedding_size=10):
    """Toy dataset plus a store with N(0, 1) tables; only ``E_1`` is trainable."""
    ds = gen_toy(d3, seed)
    store = ParamStore()
    for i, d in enumerate(ds.schema.cardinalities):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 61, i]))
        store.add(f"E{i + 1}", rng.standard_normal((d, embedding_size)),
                  trainable=(i == 0), is_embedding=True)
    return ds, store


def toy_loss_grads(ds, store):
    """Per-sample ``dl/dh`` of BCE on the FM score ``h = sum_{i<j} e_i . e_j``."""
    e = [store[f"E{i + 1}"][ds.x[:, i]] for i in range(3)]
    h = np.sum(e[0] * e[1] + e[0] * e[2] + e[1] * e[2], axis=1)
    return sigmoid(h) - ds.y


def run_toy(d3, steps=5000, seed=0, lr=1.0, embedding_size=10):
    """Train only ``E_1`` by full-batch SGD on BCE over the FM score.

    With ``E_2, E_3`` frozen, ``dL/dE_1[r] = mean_b g_b [x_1^b = r] (e_2^b + e_3^b)``.
    Returns ``{"steps": [...], "ia": [...]}`` at :func:`toy_schedule` points.
    """
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    ds, store = toy_store(d3, seed, embedding_size)
    x, y = ds.x, ds.y.astype(np.float64)
    e2 = store["E2"][x[:, 1]]
    e3 = store["E3"][x[:, 2]]
    partner = e2 + e3
    fixed = np.sum(e2 * e3, axis=1)
    scatter = one_hot_rows(x[:, 0], store["E1"].shape[0])
    n = len(y)
    e1_slot = store.slots["E1"]
    schedule = toy_schedule(steps)
    marks = set(schedule)
    traj = {"steps": [0], "ia": [information_abundance(e1_slot.value)]}
    for t in range(1, steps + 1):
        h = np.einsum("bk,bk->b", e1_slot.value[x[:, 0]], partner) + fixed
        g = (sigmoid(h) - y) / n
        store.zero_grads()
        e1_slot.grad += np.asarray(scatter @ (g[:, None] * partner))
        sgd_full_batch_step(store, lr)
        if t in marks:
            traj["steps"].append(t)
            traj["ia"].append(information_abundance(e1_slot.value))
    return traj
