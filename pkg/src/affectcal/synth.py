"""Deterministic synthetic datasets with imbalance, temporal persistence and noise.

Class geometry (centroids) depends only on ``seed``; video content depends on
``(seed, split, video index)``, so splits generated with the same seed share
class geometry but not videos.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .datamodel import (
    AFFECTNET_LABELS,
    EXPR_LABELS,
    DatasetManifest,
    FeatureStream,
    LabelTrack,
    ManifestEntry,
    ScoreStream,
    TaskKind,
    save_feature_stream,
    save_label_track,
    save_manifest,
    save_score_stream,
)
from .errors import ConfigError

_GEOMETRY = 0xC3
_AUDIO_GEOMETRY = 0xA7


@dataclass(frozen=True)
class SynthConfig:
    task: TaskKind = TaskKind.EXPR
    num_videos: int = 8
    frames_per_video: int = 1000
    feature_dim: int = 16
    class_weights: tuple[float, ...] | None = None
    segment_mean_length: float = 50.0
    feature_noise_sigma: float = 1.0
    centroid_separation: float = 3.0
    label_flip_prob: float = 0.0
    audio_agreement: float | None = None
    audio_rate_hz: float = 50.0
    audio_dim: int = 8
    pretrained_confident_frac: float | None = None
    positive_fraction: float = 0.44
    channel_rates: tuple[float, ...] | None = None
    mask_prob: float = 0.0
    frame_rate_hz: float = 30.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "task", TaskKind.parse(self.task))
        if self.class_weights is not None:
            w = np.asarray(self.class_weights, dtype=np.float64)
            if np.any(w < 0):
                raise ConfigError("class_weights must be non-negative")
            if w.size != self.task.num_outputs or abs(w.sum() - 1) > 1e-9:
                raise ConfigError(f"class_weights must be {self.task.num_outputs} values summing to 1")
            object.__setattr__(self, "class_weights", tuple(w.tolist()))
        for name in ("label_flip_prob", "mask_prob", "positive_fraction"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must lie in [0, 1]")
        for name in ("audio_agreement", "pretrained_confident_frac"):
            v = getattr(self, name)
            if v is not None and not 0 <= v <= 1:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.channel_rates is not None:
            r = tuple(float(v) for v in self.channel_rates)
            if len(r) != 12 or any(not 0 <= v <= 1 for v in r):
                raise ConfigError("channel_rates must be 12 values in [0, 1]")
            object.__setattr__(self, "channel_rates", r)
        if self.num_videos < 1 or self.frames_per_video < 1 or self.feature_dim < 1:
            raise ConfigError("num_videos, frames_per_video and feature_dim must be positive")
        if self.segment_mean_length < 1:
            raise ConfigError("segment_mean_length must be at least 1")
        if self.feature_noise_sigma < 0 or self.centroid_separation < 0:
            raise ConfigError("noise and separation must be non-negative")

    @property
    def weights(self) -> np.ndarray:
        if self.class_weights is not None:
            return np.asarray(self.class_weights)
        k = self.task.num_outputs
        return np.full(k, 1.0 / k)


@dataclass(eq=False)
class SynthVideo:
    features: FeatureStream
    labels: LabelTrack
    hidden: np.ndarray
    audio: FeatureStream | None = None
    pretrained: ScoreStream | None = None
    extras: dict = field(default_factory=dict)


def centroids(k: int, dim: int, separation: float, seed: int, salt: int = _GEOMETRY) -> np.ndarray:
    """``k`` class centroids with pairwise distance ``separation`` when ``dim >= k``."""
    rng = np.random.default_rng([int(seed), salt])
    g = rng.normal(size=(dim, max(k, dim)))
    if dim >= k:
        q, _ = np.linalg.qr(g[:, :k])
        dirs = q.T
    else:
        dirs = g[:, :k].T
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return dirs * (separation / np.sqrt(2.0))


def _video_rng(cfg: SynthConfig, split: str, index: int):
    return np.random.default_rng([int(cfg.seed), zlib.crc32(split.encode()), int(index)])


def _segments(rng, n: int, mean_len: float, weights: np.ndarray) -> np.ndarray:
    out = np.empty(n, dtype=np.int64)
    t = 0
    while t < n:
        length = int(rng.geometric(1.0 / mean_len))
        out[t: t + length] = rng.choice(weights.size, p=weights)
        t += length
    return out


def _alternating(rng, n: int, mean_on: float, on_fraction: float) -> np.ndarray:
    """0/1 sequence alternating geometric runs; on-runs average ``mean_on``
    frames and the on-fraction is ``on_fraction``."""
    if on_fraction <= 0:
        return np.zeros(n, dtype=np.int64)
    if on_fraction >= 1:
        return np.ones(n, dtype=np.int64)
    mean_off = max(1.0, mean_on * (1.0 - on_fraction) / on_fraction)
    out = np.empty(n, dtype=np.int64)
    state = int(rng.random() < on_fraction)
    t = 0
    while t < n:
        length = int(rng.geometric(1.0 / (mean_on if state else mean_off)))
        out[t: t + length] = state
        t += length
        state = 1 - state
    return out


def _flip(rng, labels: np.ndarray, k: int, prob: float) -> np.ndarray:
    if prob == 0:
        return labels.copy()
    flip = rng.random(labels.size) < prob
    other = (labels + rng.integers(1, k, labels.size)) % k
    return np.where(flip, other, labels)


def _pretrained_stream(rng, video_id, frame_ids, hidden, frac) -> ScoreStream:
    """AffectNet-order scores: confident (~0.97) on whole segments with
    probability ``frac``, diffuse elsewhere. Confident ``Other`` segments put
    their mass on Contempt, which has no target class."""
    n = hidden.size
    to_src = {i: AFFECTNET_LABELS.index(name) for i, name in enumerate(EXPR_LABELS.names)
              if name in AFFECTNET_LABELS.names}
    contempt = AFFECTNET_LABELS.index("Contempt")
    k = len(AFFECTNET_LABELS)
    scores = 0.5 * rng.dirichlet(np.ones(k), size=n) + 0.5 / k
    starts = np.flatnonzero(np.diff(hidden, prepend=-1) != 0)
    ends = np.append(starts[1:], n)
    for a, b in zip(starts, ends):
        if rng.random() >= frac:
            continue
        src = to_src.get(int(hidden[a]), contempt)
        rest = 0.03 * rng.dirichlet(np.ones(k), size=b - a)
        rest[:, src] += 0.97
        scores[a:b] = rest
    scores /= scores.sum(axis=1, keepdims=True)
    return ScoreStream(video_id, frame_ids, scores, "probability")


def _audio_stream(rng, cfg: SynthConfig, video_id, hidden, k) -> FeatureStream:
    n = hidden.size
    duration = n / cfg.frame_rate_hz
    n_audio = max(1, int(np.ceil(duration * cfg.audio_rate_hz)))
    t_video = np.minimum(np.rint(np.arange(n_audio) / cfg.audio_rate_hz * cfg.frame_rate_hz).astype(np.int64), n - 1)
    cls = hidden[t_video]
    informative = rng.random(n_audio) < cfg.audio_agreement
    shown = np.where(informative, cls, rng.integers(0, k, n_audio))
    cent = centroids(k, cfg.audio_dim, cfg.centroid_separation, cfg.seed, _AUDIO_GEOMETRY)
    feats = cent[shown] + cfg.feature_noise_sigma * rng.normal(size=(n_audio, cfg.audio_dim))
    return FeatureStream(video_id, np.arange(n_audio), feats, "synth-audio", cfg.audio_rate_hz)


def make_video(cfg: SynthConfig, split: str, index: int) -> SynthVideo:
    rng = _video_rng(cfg, split, index)
    n = cfg.frames_per_video
    video_id = f"{split}_{index:04d}"
    frame_ids = np.arange(n)
    mask = rng.random(n) >= cfg.mask_prob
    task = cfg.task
    sigma = cfg.feature_noise_sigma
    if task == TaskKind.VA:
        basis = centroids(2, cfg.feature_dim, cfg.centroid_separation * np.sqrt(2.0), cfg.seed)
        targets = np.zeros((n, 2))
        t = 0
        while t < n:
            length = int(rng.geometric(1.0 / cfg.segment_mean_length))
            targets[t: t + length] = rng.uniform(-0.9, 0.9, size=2)
            t += length
        kernel = np.ones(9) / 9
        hidden = np.column_stack([np.convolve(np.pad(targets[:, j], 4, mode="edge"), kernel, "valid")
                                  for j in range(2)])
        feats = hidden @ basis + sigma * rng.normal(size=(n, cfg.feature_dim))
        noisy = hidden + cfg.label_flip_prob * rng.normal(size=(n, 2))
        labels = np.clip(noisy, -1, 1)
        return SynthVideo(FeatureStream(video_id, frame_ids, feats, "synth-va", cfg.frame_rate_hz),
                          LabelTrack(video_id, task, frame_ids, labels, mask), hidden)
    if task == TaskKind.AU:
        rates = np.asarray(cfg.channel_rates if cfg.channel_rates is not None
                           else np.linspace(0.05, 0.5, 12))
        hidden = np.column_stack([_alternating(rng, n, cfg.segment_mean_length, r) for r in rates])
        cent = centroids(12, cfg.feature_dim, cfg.centroid_separation, cfg.seed)
        feats = hidden @ cent + sigma * rng.normal(size=(n, cfg.feature_dim))
        flip = rng.random((n, 12)) < cfg.label_flip_prob
        labels = np.where(flip, 1 - hidden, hidden)
        return SynthVideo(FeatureStream(video_id, frame_ids, feats, "synth-au", cfg.frame_rate_hz),
                          LabelTrack(video_id, task, frame_ids, labels, mask), hidden)
    k = task.num_outputs
    if task == TaskKind.VD:
        hidden = _alternating(rng, n, cfg.segment_mean_length, cfg.positive_fraction)
    else:
        hidden = _segments(rng, n, cfg.segment_mean_length, cfg.weights)
    cent = centroids(k, cfg.feature_dim, cfg.centroid_separation, cfg.seed)
    feats = cent[hidden] + sigma * rng.normal(size=(n, cfg.feature_dim))
    labels = _flip(rng, hidden, k, cfg.label_flip_prob)
    video = SynthVideo(FeatureStream(video_id, frame_ids, feats, f"synth-{task.value}", cfg.frame_rate_hz),
                       LabelTrack(video_id, task, frame_ids, labels, mask), hidden)
    if task == TaskKind.EXPR:
        if cfg.audio_agreement is not None:
            video.audio = _audio_stream(rng, cfg, video_id, hidden, k)
        if cfg.pretrained_confident_frac is not None:
            video.pretrained = _pretrained_stream(rng, video_id, frame_ids, hidden, cfg.pretrained_confident_frac)
    return video


def generate_videos(cfg: SynthConfig, split: str = "train") -> list[SynthVideo]:
    return [make_video(cfg, split, i) for i in range(cfg.num_videos)]


def generate(cfg: SynthConfig, out_dir, split: str = "train") -> DatasetManifest:
    """Write one split to ``out_dir/<split>/`` and its manifest to ``out_dir/<split>.json``."""
    out = Path(out_dir)
    root = out / split
    for sub in ("features", "labels", "audio", "pretrained"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    entries = []
    for video in generate_videos(cfg, split):
        vid = video.features.video_id
        fpath = root / "features" / f"{vid}.csv"
        lpath = root / "labels" / f"{vid}.csv"
        save_feature_stream(video.features, fpath)
        save_label_track(video.labels, lpath)
        apath = ppath = None
        rate = None
        if video.audio is not None:
            apath = root / "audio" / f"{vid}.csv"
            save_feature_stream(video.audio, apath)
            rate = video.audio.frame_rate_hz
        if video.pretrained is not None:
            ppath = root / "pretrained" / f"{vid}.csv"
            save_score_stream(video.pretrained, ppath)
        entries.append(ManifestEntry(vid, str(fpath), str(lpath), apath and str(apath), rate,
                                     ppath and str(ppath)))
    manifest = DatasetManifest(cfg.task, split, tuple(entries), str(out / f"{split}.json"))
    save_manifest(manifest, out / f"{split}.json")
    return manifest


def generate_vd(cfg: SynthConfig, out_dir=None, split: str = "train"):
    """Binary violent / non-violent dataset; writes files when ``out_dir`` is given."""
    cfg = replace(cfg, task=TaskKind.VD)
    if out_dir is None:
        return generate_videos(cfg, split)
    return generate(cfg, out_dir, split)
