"""Training losses. Every loss returns ``(value, d value / d logits)``.

Logits are ``(n, C)``; all losses average over the ``n`` rows (and over
channels for the multi-label loss).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..datamodel import ClassPriorTable
from ..errors import BatchTooSmallError, ConfigError, DegenerateClassError, ShapeError
from .network import log_softmax, sigmoid, softmax

LOSS_KINDS = ("weighted_softmax", "mse_ccc", "weighted_binary", "weighted_ce", "focal")
WEIGHT_MODES = ("inverse_frequency", "paper_literal")
CCC_EPS = 1e-8


def _check_class_labels(logits, labels):
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} do not align")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError("label outside the class range")
    return logits, labels


def class_weights(priors: ClassPriorTable, mode: str = "inverse_frequency") -> np.ndarray:
    """Per-class loss weights from training frame counts.

    ``inverse_frequency`` gives max_c N_c / N_y; ``paper_literal`` gives N_y / N.
    """
    counts = priors.counts.astype(np.float64)
    if mode == "inverse_frequency":
        if np.any(counts == 0):
            raise DegenerateClassError(f"classes {np.flatnonzero(counts == 0).tolist()} have no training frames")
        return counts.max() / counts
    if mode == "paper_literal":
        return counts / priors.total
    raise ConfigError(f"unknown weight mode {mode!r}")


def pos_weights(priors: ClassPriorTable, mode: str = "inverse_frequency") -> np.ndarray:
    """Positive-class weights per channel: (N - N_c) / N_c, or N_c / N literally."""
    counts = priors.counts.astype(np.float64)
    if mode == "inverse_frequency":
        if np.any(counts == 0):
            raise DegenerateClassError(f"channels {np.flatnonzero(counts == 0).tolist()} have no positives")
        return (priors.total - counts) / counts
    if mode == "paper_literal":
        return counts / priors.total
    raise ConfigError(f"unknown weight mode {mode!r}")


def weighted_softmax(logits, labels, weights) -> tuple[float, np.ndarray]:
    logits, labels = _check_class_labels(logits, labels)
    n = logits.shape[0]
    w = np.asarray(weights, dtype=np.float64)[labels]
    lsm = log_softmax(logits)
    loss = float(np.mean(-w * lsm[np.arange(n), labels]))
    grad = softmax(logits)
    grad[np.arange(n), labels] -= 1.0
    grad *= (w / n)[:, None]
    return loss, grad


def loss_weighted_softmax(logits, labels, priors: ClassPriorTable, mode: str = "inverse_frequency"):
    return weighted_softmax(logits, labels, class_weights(priors, mode))


def loss_weighted_ce(logits, labels, violent_weight: float = 1.15):
    """Two-class cross-entropy with class-1 (violent) rows scaled by ``violent_weight``."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[1] != 2:
        raise ShapeError("weighted CE expects two-class logits")
    return weighted_softmax(logits, labels, [1.0, float(violent_weight)])


def loss_focal(logits, labels, gamma: float = 2.0):
    """Mean of -(1 - p_y)^gamma log p_y."""
    if gamma < 0:
        raise ConfigError("focal gamma must be non-negative")
    logits, labels = _check_class_labels(logits, labels)
    n = logits.shape[0]
    rows = np.arange(n)
    lsm = log_softmax(logits)
    logp = lsm[rows, labels]
    p = np.exp(logp)
    q = 1.0 - p
    loss = float(np.mean(-(q ** gamma) * logp))
    # dL/dz_j = [gamma q^(gamma-1) p log p - q^gamma] (onehot_j - s_j)
    if gamma == 0:
        dq = np.zeros_like(q)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            dq = np.where(q > 0, gamma * q ** (gamma - 1.0) * p * logp, 0.0)
    coef = dq - q ** gamma
    s = softmax(logits)
    onehot = np.zeros_like(s)
    onehot[rows, labels] = 1.0
    grad = coef[:, None] * (onehot - s) / n
    return loss, grad


def ccc_with_grad(x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Concordance correlation of ``x`` against ``y`` and its gradient w.r.t. ``x``.

    Population statistics. Returns 0 (and zero gradient) when both variances
    fall below ``CCC_EPS``.
    """
    n = x.shape[0]
    mx, my = x.mean(), y.mean()
    dx, dy = x - mx, y - my
    vx, vy = np.mean(dx * dx), np.mean(dy * dy)
    if vx < CCC_EPS and vy < CCC_EPS:
        return 0.0, np.zeros_like(x)
    cov = np.mean(dx * dy)
    shift = mx - my
    den = vx + vy + shift * shift
    val = 2.0 * cov / den
    grad = (2.0 * dy * den - 2.0 * cov * (2.0 * dx + 2.0 * shift)) / (n * den * den)
    return float(val), grad


def loss_mse_ccc(pred, target) -> tuple[float, np.ndarray]:
    """MSE_V + MSE_A - CCC_V - CCC_A over a batch of (valence, arousal) rows."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.ndim != 2 or pred.shape[1] != 2:
        raise ShapeError(f"expected matching (n, 2) arrays, got {pred.shape} and {target.shape}")
    n = pred.shape[0]
    if n < 2:
        raise BatchTooSmallError("CCC needs a batch of at least 2 rows")
    diff = pred - target
    loss = float(np.sum(np.mean(diff * diff, axis=0)))
    grad = 2.0 * diff / n
    for j in range(2):
        c, g = ccc_with_grad(pred[:, j], target[:, j])
        loss -= c
        grad[:, j] -= g
    return loss, grad


def loss_weighted_binary(logits, targets, pos_weight) -> tuple[float, np.ndarray]:
    """Mean over rows and channels of -[w y log s(z) + (1 - y) log(1 - s(z))]."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if z.shape != y.shape or z.ndim != 2:
        raise ShapeError(f"logits {z.shape} and targets {y.shape} do not align")
    if np.any((y != 0) & (y != 1)):
        raise ValueError("binary targets must be 0/1")
    w = np.broadcast_to(np.asarray(pos_weight, dtype=np.float64), (z.shape[1],))
    # log s(z) = -softplus(-z), log(1 - s(z)) = -softplus(z)
    log_s = -np.logaddexp(0.0, -z)
    log_1ms = -np.logaddexp(0.0, z)
    loss = float(np.mean(-(w * y * log_s + (1.0 - y) * log_1ms)))
    s = sigmoid(z)
    grad = (-w * y * (1.0 - s) + (1.0 - y) * s) / z.size
    return loss, grad


@dataclass(frozen=True)
class LossSpec:
    kind: str = "weighted_softmax"
    weights: tuple[float, ...] | None = None
    focal_gamma: float = 2.0
    class_weight_mode: str = "inverse_frequency"
    violent_weight: float = 1.15

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ConfigError(f"unknown loss {self.kind!r}; choose from {LOSS_KINDS}")
        if self.class_weight_mode not in WEIGHT_MODES:
            raise ConfigError(f"unknown class_weight_mode {self.class_weight_mode!r}")
        if self.weights is not None:
            w = tuple(float(v) for v in self.weights)
            if not all(np.isfinite(v) and v > 0 for v in w):
                raise ConfigError("loss weights must be positive and finite")
            object.__setattr__(self, "weights", w)
        if self.focal_gamma < 0:
            raise ConfigError("focal_gamma must be non-negative")

    def resolve(self, priors: ClassPriorTable | None) -> "LossSpec":
        """Fill ``weights`` from class priors where the loss kind needs them."""
        if self.weights is not None or self.kind not in ("weighted_softmax", "weighted_binary"):
            return self
        if priors is None:
            raise ConfigError(f"loss {self.kind} needs class priors or explicit weights")
        fn = class_weights if self.kind == "weighted_softmax" else pos_weights
        w = fn(priors, self.class_weight_mode)
        if not np.all(w > 0):
            raise DegenerateClassError("derived loss weights must be positive")
        return LossSpec(self.kind, tuple(w.tolist()), self.focal_gamma, self.class_weight_mode,
                        self.violent_weight)

    def __call__(self, logits, labels) -> tuple[float, np.ndarray]:
        if self.kind == "weighted_softmax":
            if self.weights is None:
                raise ConfigError("weighted_softmax needs resolved weights")
            return weighted_softmax(logits, labels, self.weights)
        if self.kind == "weighted_binary":
            if self.weights is None:
                raise ConfigError("weighted_binary needs resolved weights")
            return loss_weighted_binary(logits, labels, self.weights)
        if self.kind == "mse_ccc":
            return loss_mse_ccc(logits, labels)
        if self.kind == "weighted_ce":
            if self.weights is not None:
                return weighted_softmax(logits, labels, self.weights)
            return loss_weighted_ce(logits, labels, self.violent_weight)
        return loss_focal(logits, labels, self.focal_gamma)
