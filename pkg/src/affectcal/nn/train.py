"""Mini-batch training with adaptive moments (decoupled weight decay)."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from ..datamodel import ClassPriorTable
from ..errors import BatchTooSmallError, DivergenceError, EmptyInputError, ShapeError
from .losses import LossSpec
from .network import NetworkSpec, NetworkState, backward, forward, init_state

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 256
    epochs: int = 20
    seed: int = 0
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(state: NetworkState, grads: dict[str, np.ndarray], cfg: TrainConfig) -> None:
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for name, p in state.params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        if cfg.weight_decay:
            p -= cfg.lr * cfg.weight_decay * p
        p -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


def _flat_loss(fwd, loss: LossSpec, y, valid):
    c = fwd.logits.shape[-1]
    flat = fwd.logits.reshape(-1, c)
    y = np.asarray(y)
    y_flat = y.reshape(flat.shape[0], -1) if y.ndim > (fwd.logits.ndim - 1) else y.reshape(flat.shape[0])
    if valid is None:
        return loss(flat, y_flat)
    keep = np.asarray(valid, dtype=bool).reshape(-1)
    value, g_sub = loss(flat[keep], y_flat[keep])
    g = np.zeros_like(flat)
    g[keep] = g_sub
    return value, g


def loss_and_grads(state: NetworkState, spec: NetworkSpec, loss: LossSpec, x, y, valid=None):
    """Loss over the valid output rows and parameter gradients.

    For temporal inputs ``(B, T, D)`` the per-frame outputs are flattened and
    ``valid`` (shape ``(B, T)``) drops unannotated frames from the loss.
    """
    fwd = forward(state, spec, x)
    value, g = _flat_loss(fwd, loss, y, valid)
    return value, backward(state, spec, fwd, g.reshape(fwd.logits.shape))


def loss_value(state: NetworkState, spec: NetworkSpec, loss: LossSpec, x, y, valid=None,
               relu_gates=None) -> float:
    return _flat_loss(forward(state, spec, x, relu_gates), loss, y, valid)[0]


def _batches(n: int, cfg: TrainConfig, rng, groups, min_size: int) -> list[np.ndarray]:
    if groups is None:
        order = rng.permutation(n)
        chunks = [order[i: i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]
    else:
        # Contiguous chunks inside each group (video), visited in shuffled order.
        groups = np.asarray(groups)
        chunks = []
        for g in np.unique(groups):
            idx = np.flatnonzero(groups == g)
            chunks += [idx[i: i + cfg.batch_size] for i in range(0, idx.size, cfg.batch_size)]
        chunks = [chunks[i] for i in rng.permutation(len(chunks))]
    return [c for c in chunks if c.size >= min_size]


def train(spec: NetworkSpec, loss: LossSpec, x, y, cfg: TrainConfig = TrainConfig(),
          priors: ClassPriorTable | None = None, groups=None, valid=None,
          state: NetworkState | None = None):
    """Train a head; returns ``(state, log)`` with log rows ``(epoch, step, loss)``.

    ``x`` is ``(N, D)`` for MLPs or ``(B, T, D)`` clips for the temporal head.
    ``groups`` (per row) keeps batches inside one video, which the CCC term
    relies on. ``valid`` masks frames of temporal inputs.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if x.shape[0] == 0:
        raise EmptyInputError("empty training set")
    if y.shape[0] != x.shape[0]:
        raise ShapeError("features and labels have different lengths")
    loss = loss.resolve(priors)
    state = init_state(spec, cfg.seed) if state is None else state.copy()
    rng = np.random.default_rng([int(cfg.seed), 1])
    min_size = 2 if loss.kind == "mse_ccc" else 1
    history: list[tuple[int, int, float]] = []
    for epoch in range(cfg.epochs):
        batches = _batches(x.shape[0], cfg, rng, groups, min_size)
        if not batches:
            raise BatchTooSmallError("no batch with enough rows for this loss")
        for step, idx in enumerate(batches):
            try:
                with np.errstate(over="raise", invalid="raise"):
                    value, grads = loss_and_grads(state, spec, loss, x[idx], y[idx],
                                                  None if valid is None else np.asarray(valid)[idx])
                    if not np.isfinite(value):
                        raise FloatingPointError(f"loss is {value}")
                    adam_step(state, grads, cfg)
            except FloatingPointError as exc:
                raise DivergenceError(f"numeric failure at epoch {epoch} step {step}: {exc}") from None
            history.append((epoch, step, value))
        log.debug("epoch %d mean loss %.6f", epoch, np.mean([h[2] for h in history if h[0] == epoch]))
    for name, p in state.params.items():
        if not np.all(np.isfinite(p)):
            raise DivergenceError(f"parameter {name} became non-finite")
    return state, history


def predict(state: NetworkState, spec: NetworkSpec, x, batch_size: int = 4096) -> np.ndarray:
    """Head outputs for ``x`` (rows for MLPs, one ``(T, D)`` sequence for TCNs)."""
    x = np.asarray(x, dtype=np.float64)
    if spec.temporal_head is not None or x.shape[0] <= batch_size:
        return forward(state, spec, x).outputs
    return np.concatenate([forward(state, spec, x[i: i + batch_size]).outputs
                           for i in range(0, x.shape[0], batch_size)])


def save_loss_log(history, path) -> None:
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "step", "loss"])
        for epoch, step, value in history:
            w.writerow([epoch, step, repr(float(value))])
