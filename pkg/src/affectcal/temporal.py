"""Inference-time stream transforms.

Smoothing, confidence-gated filtering against a pretrained classifier, late
fusion, decoding to labels, and clip construction / overlap averaging for
frame-level violence detection.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .datamodel import (
    AFFECTNET_LABELS,
    EXPR_LABELS,
    FeatureStream,
    LabelSet,
    LabelTrack,
    ScoreStream,
    TaskKind,
)
from .errors import AlignError, ConfigError, CoverageError, ShapeError


@dataclass(frozen=True)
class SmoothingConfig:
    """Centered window of ``window_T + 1`` frames, truncated at stream ends.

    ``max_gap`` (frame ids) splits the stream where consecutive frame ids jump
    by more than it; None never splits.
    """

    window_T: int = 0
    max_gap: int | None = None

    def __post_init__(self):
        if self.window_T < 0 or self.window_T % 2:
            raise ConfigError("window_T must be an even non-negative integer")
        if self.max_gap is not None and self.max_gap < 1:
            raise ConfigError("max_gap must be positive")


def smooth(scores: ScoreStream, cfg: SmoothingConfig) -> ScoreStream:
    half = cfg.window_T // 2
    if half == 0 or len(scores) == 0:
        return scores
    x = np.ascontiguousarray(scores.scores)
    if cfg.max_gap is None:
        out = kernels.window_mean(x, half)
    else:
        cuts = np.flatnonzero(np.diff(scores.frame_ids) > cfg.max_gap) + 1
        bounds = np.concatenate([[0], cuts, [len(scores)]])
        out = np.concatenate([kernels.window_mean(np.ascontiguousarray(x[a:b]), half)
                              for a, b in zip(bounds[:-1], bounds[1:])])
    return scores.with_scores(out)


def default_mapping(source: LabelSet = AFFECTNET_LABELS, target: LabelSet = EXPR_LABELS) -> tuple:
    """Map source classes to same-named target classes; unmatched ones (Contempt) to None."""
    return tuple(target.index(n) if n in target.names else None for n in source.names)


@dataclass(frozen=True)
class GateConfig:
    p0: float = 0.9
    source_labels: LabelSet = AFFECTNET_LABELS
    target_labels: LabelSet = EXPR_LABELS
    mapping: tuple = field(default_factory=default_mapping)

    def __post_init__(self):
        if not 0 < self.p0 <= 1:
            raise ConfigError("p0 must lie in (0, 1]")
        if len(self.mapping) != len(self.source_labels):
            raise ConfigError("mapping needs one entry per source class")
        for m in self.mapping:
            if m is not None and not 0 <= m < len(self.target_labels):
                raise ConfigError(f"mapped index {m} outside target classes")


def _same_timeline(a: ScoreStream, b: ScoreStream) -> None:
    if a.video_id != b.video_id or not np.array_equal(a.frame_ids, b.frame_ids):
        raise AlignError(f"streams {a.video_id!r} and {b.video_id!r} have different timelines")


def confidence_gate(pretrained: ScoreStream, fallback: ScoreStream, cfg: GateConfig):
    """Per-frame classes and gate mask.

    A frame takes the pretrained class when its top probability is strictly
    above ``p0`` and that class maps into the target label set; otherwise the
    fallback stream's argmax.
    """
    _same_timeline(pretrained, fallback)
    if pretrained.num_classes != len(cfg.source_labels):
        raise ShapeError("pretrained stream does not match the source label set")
    src = np.argmax(pretrained.scores, axis=1)
    top = pretrained.scores[np.arange(len(pretrained)), src]
    mapped = np.array([-1 if m is None else m for m in cfg.mapping], dtype=np.int64)[src]
    gated = (top > cfg.p0) & (mapped >= 0)
    pred = np.where(gated, mapped, np.argmax(fallback.scores, axis=1))
    return pred.astype(np.int64), gated


def blend(a: ScoreStream, b: ScoreStream, w: float) -> ScoreStream:
    """``w * a + (1 - w) * b``."""
    if not 0 <= w <= 1:
        raise ConfigError("fusion weight must lie in [0, 1]")
    if a.scores.shape != b.scores.shape:
        raise ShapeError(f"cannot blend shapes {a.scores.shape} and {b.scores.shape}")
    _same_timeline(a, b)
    if w == 1:
        return a
    if w == 0:
        return b
    return a.with_scores(w * a.scores + (1.0 - w) * b.scores)


def decode(scores: ScoreStream, task: TaskKind, thresholds=None, default_threshold: float | None = 0.5) -> LabelTrack:
    """Per-frame labels: argmax (lowest index on ties), thresholded AU channels
    (``score >= t``), or VA values clamped to [-1, 1]."""
    task = TaskKind.parse(task)
    if scores.num_classes != task.num_outputs:
        raise ShapeError(f"{task.value} expects {task.num_outputs} score columns, got {scores.num_classes}")
    if task == TaskKind.VA:
        labels = np.clip(scores.scores, -1.0, 1.0)
    elif task == TaskKind.AU:
        if thresholds is None:
            if default_threshold is None:
                raise ConfigError("AU decoding needs thresholds")
            thresholds = [default_threshold] * 12
        t = np.asarray(thresholds, dtype=np.float64)
        if t.shape != (12,):
            raise ShapeError("AU decoding needs 12 thresholds")
        labels = (scores.scores >= t).astype(np.int64)
    else:
        labels = np.argmax(scores.scores, axis=1)
    return LabelTrack(scores.video_id, task, scores.frame_ids, labels)


# ---------------------------------------------------------------- violence detection

@dataclass(frozen=True)
class VdWindowConfig:
    clip_len: int = 32
    frame_step: int = 2
    infer_stride: int = 16
    decision_threshold: float = 0.5

    def __post_init__(self):
        if self.clip_len < 1 or self.frame_step < 1:
            raise ConfigError("clip_len and frame_step must be positive")
        if not 1 <= self.infer_stride <= self.clip_len:
            raise ConfigError("infer_stride must lie in [1, clip_len]")

    @property
    def span(self) -> int:
        return self.clip_len * self.frame_step


@dataclass(frozen=True, eq=False)
class Clip:
    features: np.ndarray
    index_map: np.ndarray
    padded: bool = False


def clip_starts(n: int, cfg: VdWindowConfig, train_mode: bool) -> list[int]:
    """Start rows of each clip; the last clip is shifted left to end at the stream end."""
    if n <= cfg.span:
        return [0]
    advance = cfg.span if train_mode else cfg.infer_stride
    starts = list(range(0, n - cfg.span + 1, advance))
    if starts[-1] + cfg.span < n:
        starts.append(n - cfg.span)
    return starts


def vd_make_clips(stream: FeatureStream, cfg: VdWindowConfig = VdWindowConfig(),
                  train_mode: bool = False) -> list[Clip]:
    """Clips of ``clip_len`` rows taken every ``frame_step`` rows.

    Streams shorter than one clip span get a single clip whose indices repeat
    the last row; it is flagged ``padded``.
    """
    n = len(stream)
    if n == 0:
        raise ShapeError("cannot make clips from an empty stream")
    offsets = np.arange(cfg.clip_len, dtype=np.int64) * cfg.frame_step
    clips = []
    for s in clip_starts(n, cfg, train_mode):
        idx = s + offsets
        padded = bool(idx[-1] >= n)
        idx = np.minimum(idx, n - 1)
        clips.append(Clip(stream.features[idx], idx, padded))
    return clips


def vd_aggregate(window_probs, index_maps, total_frames: int, cfg: VdWindowConfig = VdWindowConfig()):
    """Average overlapping clip-row probabilities back onto frames.

    Frames no clip row hits (skipped by ``frame_step``) copy the nearest hit
    frame, the earlier one on ties, if it lies within ``frame_step - 1``.
    Returns ``(probabilities, decisions)`` with ``decision = prob >= threshold``.
    """
    if len(window_probs) != len(index_maps):
        raise ShapeError("one index map per clip is required")
    if not window_probs:
        raise CoverageError("no clips to aggregate")
    idx = np.concatenate([np.asarray(m, dtype=np.int64).reshape(-1) for m in index_maps])
    val = np.concatenate([np.asarray(p, dtype=np.float64).reshape(-1) for p in window_probs])
    if idx.shape != val.shape:
        raise ShapeError("clip probabilities and index maps differ in length")
    if idx.size and (idx.min() < 0 or idx.max() >= total_frames):
        raise ShapeError("index map points outside the stream")
    sums, counts = kernels.scatter_mean(idx, val, int(total_frames))
    hit = counts > 0
    prob = np.zeros(total_frames)
    prob[hit] = sums[hit] / counts[hit]
    missing = np.flatnonzero(~hit)
    if missing.size:
        covered = np.flatnonzero(hit)
        if covered.size == 0:
            raise CoverageError("no frame is covered by any clip")
        right = np.clip(np.searchsorted(covered, missing), 0, covered.size - 1)
        left = np.clip(right - 1, 0, covered.size - 1)
        d_left = np.abs(missing - covered[left])
        d_right = np.abs(covered[right] - missing)
        src = np.where(d_left <= d_right, covered[left], covered[right])
        dist = np.minimum(d_left, d_right)
        if np.any(dist > cfg.frame_step - 1):
            bad = missing[dist > cfg.frame_step - 1]
            raise CoverageError(f"{bad.size} frames are not covered (first: {int(bad[0])})")
        prob[missing] = prob[src]
    return prob, prob >= cfg.decision_threshold
