"""Iterative top-k pool training.

Round zero fits cross-entropy (plus L2) on the full training set.  Each
subsequent round rescores everything, keeps each user's top-beta
positives and top-k negatives under the current model, and refits on
that pool from the current parameters.  The checkpoint returned is the
one with the best recorded validation micro-pAp@k.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .graphs import Dataset
from .metrics import instances_from_scores, micro_papk
from .model import MedresModel


class TrainingDiverged(RuntimeError):
    """The objective went non-finite; training aborted."""


@dataclass(frozen=True)
class TrainConfig:
    k: int = 10
    outer_iterations: int = 5
    inner_epochs: int = 3
    batch_size: int = 1024
    learning_rate: float = 1e-3
    tau: float = 1e-4
    seed: int = 0
    patience: int = 3

    def __post_init__(self):
        if min(self.k, self.inner_epochs, self.batch_size, self.patience) < 1:
            raise ValueError("k, inner_epochs, batch_size, patience must be positive")
        if self.outer_iterations < 0:
            raise ValueError("outer_iterations must be nonnegative")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.tau < 0:
            raise ValueError("tau must be nonnegative")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("k", "outer_iterations", "inner_epochs", "batch_size",
                 "learning_rate", "tau", "seed", "patience")}


@dataclass(frozen=True)
class Pool:
    """Flattened per-user selection of training example indices."""

    indices: np.ndarray
    by_user: dict

    def size_for(self, user_key: str) -> int:
        return len(self.by_user[user_key])


def select_top(scores, labels, count: int, which: str) -> np.ndarray:
    """Indices of the `count` best-scored examples with the given label.

    `which` is '+' or '-'; fewer come back when the label class is
    smaller than `count`.  Score ties resolve to the smallest index.
    """
    if which not in ("+", "-"):
        raise ValueError("which must be '+' or '-'")
    if count < 0:
        raise ValueError("count must be nonnegative")
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    want = 1 if which == "+" else 0
    candidates = np.nonzero(labels == want)[0]
    order = np.argsort(-scores[candidates], kind="stable")
    return candidates[order[:count]]


def build_pool(model: MedresModel, ds: Dataset, k: int) -> Pool:
    """Top-beta positives plus top-k negatives per user, current scores."""
    if len(ds) == 0:
        raise ValueError("cannot build a pool from an empty dataset")
    scores, groups = model.batch_score(ds)
    by_user = {}
    chunks = []
    for key, idx in groups.items():
        idx = np.asarray(idx, dtype=np.int64)
        y = ds.labels[idx]
        s = scores[idx]
        beta = min(int(y.sum()), k)
        chosen = np.concatenate([
            idx[select_top(s, y, beta, "+")],
            idx[select_top(s, y, k, "-")],
        ])
        chosen = np.sort(chosen)
        by_user[key] = chosen
        chunks.append(chosen)
    indices = np.concatenate(chunks)
    return Pool(indices, by_user)


def regularized_objective(model: MedresModel, tape: ad.Tape, ds: Dataset,
                          idx, tau: float) -> ad.Var:
    """Cross-entropy over the batch plus tau * sum of squared weights.

    The decay sum covers weight matrices only; biases, adjacency
    transforms, and free embedding tables are exempt unless the store
    registered them as decayable.
    """
    idx = np.asarray(idx, dtype=np.int64)
    preds = model.forward_scores(tape, ds, idx)
    loss = ad.bce(preds, ds.labels[idx].astype(np.float64)[:, None])
    if tau > 0.0:
        penalty = None
        for name in model.store.names():
            if not model.store.decays(name):
                continue
            p = tape.param(model.store, name)
            sq = ad.sum_all(ad.mul(p, p))
            penalty = sq if penalty is None else ad.add(penalty, sq)
        if penalty is not None:
            loss = ad.add(loss, ad.scale(penalty, tau))
    return loss


@dataclass
class HistoryRow:
    iteration: int
    train_micro_papk: float
    val_micro_papk: float
    loss: float
    wall_time_s: float


@dataclass
class FitResult:
    history: list = field(default_factory=list)
    best_iteration: int = 0
    best_val: float = float("-inf")


def _micro(scores, ds: Dataset, k: int) -> float:
    instances = instances_from_scores(scores, ds.labels, ds.user_keys, k)
    return micro_papk(instances, k=k).value


def _train_epochs(model, ds, subset, cfg, rng) -> float:
    """Run the inner refit epochs; returns the mean minibatch objective."""
    losses = []
    for _ in range(cfg.inner_epochs):
        perm = rng.permutation(subset.size)
        for start in range(0, subset.size, cfg.batch_size):
            batch = subset[perm[start:start + cfg.batch_size]]
            tape = ad.Tape()
            loss = regularized_objective(model, tape, ds, batch, cfg.tau)
            value = float(loss.value)
            if not np.isfinite(value):
                raise TrainingDiverged(f"non-finite objective {value!r} on a batch of {batch.size}")
            grads = ad.backward(loss)
            ad.adam_step(model.store, grads, cfg.learning_rate)
            losses.append(value)
    return float(np.mean(losses))


def fit(model: MedresModel, train: Dataset, val: Dataset, cfg: TrainConfig) -> FitResult:
    """Round-zero full fit, then `outer_iterations` pool refits.

    Refits warm-start from the current parameters.  The model is left
    holding the parameters of the best-validation round.
    """
    if len(train) == 0:
        raise ValueError("empty training dataset")
    rng = np.random.default_rng(cfg.seed)
    result = FitResult()
    subset = np.arange(len(train), dtype=np.int64)
    best_snapshot = model.store.snapshot()
    stale = 0
    for iteration in range(cfg.outer_iterations + 1):
        started = time.perf_counter()
        mean_loss = _train_epochs(model, train, subset, cfg, rng)
        train_scores, _ = model.batch_score(train)
        val_scores, _ = model.batch_score(val)
        row = HistoryRow(
            iteration=iteration,
            train_micro_papk=_micro(train_scores, train, cfg.k),
            val_micro_papk=_micro(val_scores, val, cfg.k),
            loss=mean_loss,
            wall_time_s=time.perf_counter() - started,
        )
        result.history.append(row)
        if row.val_micro_papk > result.best_val:
            result.best_val = row.val_micro_papk
            result.best_iteration = iteration
            best_snapshot = model.store.snapshot()
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
        if iteration < cfg.outer_iterations:
            subset = build_pool(model, train, cfg.k).indices
    model.store.restore(best_snapshot)
    return result


def write_history(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "train_micro_papk", "val_micro_papk", "loss", "wall_time_s"])
        for r in rows:
            w.writerow([r.iteration, f"{r.train_micro_papk:.10g}", f"{r.val_micro_papk:.10g}",
                        f"{r.loss:.10g}", f"{r.wall_time_s:.6f}"])
