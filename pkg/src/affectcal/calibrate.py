"""Post-hoc calibration: logit-bias coordinate search and per-channel thresholds.

Both searches maximise F1 on a calibration split.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .datamodel import CalibrationArtifact, ClassPriorTable, LabelTrack, ScoreStream, TaskKind
from .errors import AlignError, ConfigError, EmptyInputError, ShapeError

log = logging.getLogger(__name__)

LOG_EPS = 1e-12
THRESHOLD_GRID = tuple(round(0.1 * k, 1) for k in range(1, 10))


@dataclass(frozen=True)
class GlaConfig:
    grid_lo: float = -2.0
    grid_hi: float = 2.0
    grid_step: float = 0.1
    max_passes: int = 5
    init: str = "prior"

    def __post_init__(self):
        if not self.grid_lo < self.grid_hi:
            raise ConfigError("grid_lo must be below grid_hi")
        if not self.grid_step > 0:
            raise ConfigError("grid_step must be positive")
        if self.max_passes < 1:
            raise ConfigError("max_passes must be at least 1")
        if self.init not in ("prior", "zero"):
            raise ConfigError("init must be 'prior' or 'zero'")

    def grid(self) -> np.ndarray:
        """Multiples of ``grid_step`` inside ``[grid_lo, grid_hi]``."""
        k_lo = int(np.ceil(self.grid_lo / self.grid_step - 1e-9))
        k_hi = int(np.floor(self.grid_hi / self.grid_step + 1e-9))
        values = np.round(np.arange(k_lo, k_hi + 1) * self.grid_step, 12)
        if values.size == 0:
            raise ConfigError("search grid is empty")
        return values


def log_scores(probabilities: np.ndarray) -> np.ndarray:
    return np.log(np.asarray(probabilities, dtype=np.float64) + LOG_EPS)


def adjusted_scores(probabilities: ScoreStream, bias) -> ScoreStream:
    """``log(p + eps) + b`` per class; argmax gives the calibrated class."""
    if probabilities.kind != "probability" or probabilities.multilabel:
        raise ConfigError("adjusted_scores needs a class-probability stream")
    bias = np.asarray(bias, dtype=np.float64)
    if bias.shape != (probabilities.num_classes,):
        raise ShapeError(f"bias length {bias.size} != {probabilities.num_classes} classes")
    return probabilities.with_scores(log_scores(probabilities.scores) + bias, kind="logit")


def adjusted_probabilities(probabilities: ScoreStream, bias) -> ScoreStream:
    """Softmax of the adjusted scores, i.e. ``p * exp(b)`` renormalised per frame.

    Same per-frame argmax as :func:`adjusted_scores`, but a probability stream
    that can be smoothed and blended.
    """
    s = adjusted_scores(probabilities, bias).scores
    e = np.exp(s - s.max(axis=1, keepdims=True))
    return probabilities.with_scores(e / e.sum(axis=1, keepdims=True), kind="probability")


def _stack(scores: Sequence[ScoreStream], labels: Sequence[LabelTrack]):
    if len(scores) != len(labels):
        raise AlignError("different number of score streams and label tracks")
    if not scores:
        raise EmptyInputError("empty calibration set")
    rows, truth = [], []
    for s, t in zip(scores, labels):
        if s.video_id != t.video_id or not np.array_equal(s.frame_ids, t.frame_ids):
            raise AlignError(f"scores and labels are not aligned for {t.video_id!r}")
        rows.append(s.scores[t.mask])
        truth.append(t.labels[t.mask])
    x = np.concatenate(rows)
    y = np.concatenate(truth)
    if x.shape[0] == 0:
        raise EmptyInputError("calibration set has no annotated frames")
    return x, y


def macro_f1_of_bias(logp: np.ndarray, truth: np.ndarray, bias) -> float:
    pred = np.argmax(logp + np.asarray(bias, dtype=np.float64), axis=1)
    cm = kernels.confusion_matrix(pred, truth, logp.shape[1])
    tp = np.diag(cm)
    return kernels.macro_from_counts(tp, cm.sum(axis=0) - tp, cm.sum(axis=1) - tp)[1]


def fit_logit_biases(scores: Sequence[ScoreStream], labels: Sequence[LabelTrack],
                     priors: ClassPriorTable | None = None, config: GlaConfig = GlaConfig(),
                     source_manifest_hash: str = "") -> CalibrationArtifact:
    """Coordinate search for per-class additive biases maximising macro-F1.

    Each pass visits classes in order and sweeps that class's bias over the
    grid with the others fixed. A sweep's best value (lowest on ties) is
    adopted only if it strictly beats the current objective, so the objective
    never decreases. Stops after a pass with no change.
    ``search_log`` rows are ``[pass, class, value, f1]``; row ``[0, -1, 0.0, f1]``
    records the starting objective.
    """
    probs, truth = _stack(scores, labels)
    k = probs.shape[1]
    task = labels[0].task
    if config.init == "prior":
        if priors is None:
            raise ConfigError("prior initialisation needs class priors")
        if priors.counts.size != k:
            raise ShapeError("priors do not match the number of classes")
        bias = priors.priors.astype(np.float64).copy()
    else:
        bias = np.zeros(k)
    logp = np.ascontiguousarray(log_scores(probs))
    truth = np.ascontiguousarray(truth, dtype=np.int64)
    grid = config.grid()
    current = macro_f1_of_bias(logp, truth, bias)
    search_log = [[0, -1, 0.0, current]]
    for pass_no in range(1, config.max_passes + 1):
        changed = False
        for c in range(k):
            f1s = kernels.bias_sweep(logp, truth, bias, c, grid)
            best = int(np.argmax(f1s))
            if f1s[best] > current:
                bias[c] = grid[best]
                current = float(f1s[best])
                changed = True
            search_log.append([pass_no, c, float(bias[c]), current])
        log.debug("GLA pass %d macro-F1 %.6f", pass_no, current)
        if not changed:
            break
    return CalibrationArtifact(task, bias=bias.tolist(), search_log=search_log,
                               source_manifest_hash=source_manifest_hash)


def tune_thresholds(scores: Sequence[ScoreStream], labels: Sequence[LabelTrack],
                    source_manifest_hash: str = "") -> CalibrationArtifact:
    """Per-channel threshold from {0.1, ..., 0.9} maximising binary F1 of ``score >= t``.

    Ties go to the lowest threshold. Channels with no positive frames keep 0.5
    and are listed in ``warnings``.
    """
    x, y = _stack(scores, labels)
    if x.shape[1] != 12 or y.ndim != 2 or y.shape[1] != 12:
        raise ShapeError("threshold tuning expects 12 AU channels")
    grid = np.asarray(THRESHOLD_GRID)
    thresholds, warnings, search_log = [], [], []
    for c in range(12):
        truth = np.ascontiguousarray(y[:, c], dtype=np.int64)
        if not truth.any():
            thresholds.append(0.5)
            warnings.append(f"channel {c}: no positive frames, threshold left at 0.5")
            continue
        f1s = kernels.threshold_sweep(np.ascontiguousarray(x[:, c]), truth, grid)
        best = int(np.argmax(f1s))
        thresholds.append(float(grid[best]))
        search_log.append([1, c, float(grid[best]), float(f1s[best])])
    for w in warnings:
        log.warning(w)
    return CalibrationArtifact(TaskKind.AU, thresholds=thresholds, search_log=search_log,
                               source_manifest_hash=source_manifest_hash, warnings=warnings)
