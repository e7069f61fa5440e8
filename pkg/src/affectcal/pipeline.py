"""End-to-end glue: load a split, score it with trained heads, run the
post-processing chain and decode.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .calibrate import adjusted_probabilities
from .datamodel import (
    ClassPriorTable,
    DatasetManifest,
    FeatureStream,
    LabelTrack,
    ScoreStream,
    TaskKind,
    _write_text,
    align_audio_to_video,
    load_feature_stream,
    load_label_track,
    load_score_stream,
)
from .errors import ConfigError, FormatError
from .nn import NetworkSpec, NetworkState, load_network, predict, save_network
from .temporal import (
    GateConfig,
    SmoothingConfig,
    VdWindowConfig,
    blend,
    confidence_gate,
    decode,
    smooth,
    vd_aggregate,
    vd_make_clips,
)


def label_task(task: TaskKind) -> TaskKind:
    """Audio heads are trained on expression labels."""
    task = TaskKind.parse(task)
    return TaskKind.EXPR if task == TaskKind.AUDIO else task


def num_threads() -> int:
    try:
        return max(1, int(os.environ.get("AFFECTCAL_THREADS", "1")))
    except ValueError:
        raise ConfigError("AFFECTCAL_THREADS must be an integer") from None


def pmap(fn: Callable, items: Sequence) -> list:
    """Ordered map, threaded up to ``AFFECTCAL_THREADS``."""
    n = num_threads()
    if n == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


@dataclass(eq=False)
class Video:
    video_id: str
    features: FeatureStream
    labels: LabelTrack | None = None
    audio: FeatureStream | None = None
    pretrained: ScoreStream | None = None


def load_split(manifest: DatasetManifest, need_labels: bool = False) -> list[Video]:
    task = label_task(manifest.task)

    def load(entry):
        feats = load_feature_stream(entry.feature_path)
        if feats.video_id != entry.video_id:
            raise FormatError(f"{entry.feature_path}: video_id {feats.video_id!r} != manifest {entry.video_id!r}")
        labels = None
        if entry.label_path is not None:
            labels = load_label_track(entry.label_path, task)
            if not np.array_equal(labels.frame_ids, feats.frame_ids):
                raise FormatError(f"{entry.label_path}: frame ids differ from the feature stream")
        elif need_labels:
            raise ConfigError(f"manifest entry {entry.video_id} has no label_path")
        audio = None
        if entry.audio_feature_path is not None:
            raw = load_feature_stream(entry.audio_feature_path)
            if entry.audio_rate_hz is not None:
                raw = replace(raw, frame_rate_hz=entry.audio_rate_hz)
            audio = align_audio_to_video(raw, feats.frame_ids, feats.frame_rate_hz)
        pre = load_score_stream(entry.pretrained_score_path) if entry.pretrained_score_path else None
        return Video(entry.video_id, feats, labels, audio, pre)

    return pmap(load, list(manifest.entries))


# ---------------------------------------------------------------- models

@dataclass
class Model:
    spec: NetworkSpec
    state: NetworkState
    meta: dict = field(default_factory=dict)

    @property
    def task(self) -> TaskKind:
        return TaskKind.parse(self.meta.get("task", "expr"))

    @property
    def priors(self) -> ClassPriorTable | None:
        if "class_counts" not in self.meta:
            return None
        return ClassPriorTable(self.meta["class_counts"], self.meta["total"], self.task == TaskKind.AU)

    @property
    def vd_window(self) -> VdWindowConfig:
        return VdWindowConfig(**self.meta.get("vd_window", {}))


def save_model(path, model: Model) -> None:
    save_network(path, model.spec, model.state)
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    doc["meta"] = model.meta
    _write_text(path, json.dumps(doc) + "\n")


def load_model(path) -> Model:
    spec, state = load_network(path)
    with open(path, encoding="utf-8") as fh:
        meta = json.load(fh).get("meta", {})
    return Model(spec, state, meta)


def model_input(model: Model, video: Video) -> FeatureStream:
    if model.meta.get("modality", "video") == "audio":
        if video.audio is None:
            raise ConfigError(f"audio model needs audio features for {video.video_id}")
        return video.audio
    return video.features


def score_video(model: Model, video: Video) -> ScoreStream:
    """Head outputs on one video as a score stream aligned to its frames."""
    feats = model_input(model, video)
    if model.spec.temporal_head is not None:
        cfg = model.vd_window
        clips = vd_make_clips(feats, cfg, train_mode=False)
        probs = [predict(model.state, model.spec, c.features)[:, 1] for c in clips]
        p, _ = vd_aggregate(probs, [c.index_map for c in clips], len(feats), cfg)
        return ScoreStream(video.video_id, feats.frame_ids, np.column_stack([1.0 - p, p]))
    out = predict(model.state, model.spec, feats.features)
    if model.spec.head == "softmax":
        return ScoreStream(video.video_id, feats.frame_ids, out, "probability")
    if model.spec.head == "sigmoid":
        return ScoreStream(video.video_id, feats.frame_ids, out, "probability", multilabel=True)
    return ScoreStream(video.video_id, feats.frame_ids, out, "logit")


def score_split(model: Model, videos: Sequence[Video]) -> list[ScoreStream]:
    return pmap(lambda v: score_video(model, v), list(videos))


# ---------------------------------------------------------------- post-processing

@dataclass(frozen=True)
class PostConfig:
    """Post-processing stages. ``None`` disables a stage."""

    fusion_w: float | None = None
    bias: tuple[float, ...] | None = None
    smooth_T: int = 0
    gate_p0: float | None = None
    thresholds: tuple[float, ...] | None = None
    decision_threshold: float = 0.5


def fuse_streams(video: Sequence[ScoreStream], audio: Sequence[ScoreStream] | None, w: float | None):
    if w is None or audio is None:
        return list(video)
    return [blend(a, b, w) for a, b in zip(video, audio)]


def postprocess(task: TaskKind, video_scores: ScoreStream, cfg: PostConfig,
                audio_scores: ScoreStream | None = None, pretrained: ScoreStream | None = None):
    """Fusion, bias adjustment, smoothing, gating and decoding for one video.

    Returns ``(predictions, final scores, gate mask or None)``.
    """
    task = label_task(task)
    scores = video_scores
    if cfg.fusion_w is not None:
        if audio_scores is None:
            raise ConfigError("fusion needs audio scores")
        scores = blend(scores, audio_scores, cfg.fusion_w)
    if cfg.bias is not None:
        scores = adjusted_probabilities(scores, cfg.bias)
    smoothing = SmoothingConfig(cfg.smooth_T)
    scores = smooth(scores, smoothing)
    gate = None
    if task == TaskKind.EXPR:
        if cfg.gate_p0 is not None:
            if pretrained is None:
                raise ConfigError(f"gating needs pretrained scores for {scores.video_id}")
            pred, gate = confidence_gate(smooth(pretrained, smoothing), scores, GateConfig(cfg.gate_p0))
            track = LabelTrack(scores.video_id, task, scores.frame_ids, pred)
        else:
            track = decode(scores, task)
    elif task == TaskKind.VD:
        labels = (scores.scores[:, 1] >= cfg.decision_threshold).astype(np.int64)
        track = LabelTrack(scores.video_id, task, scores.frame_ids, labels)
    else:
        track = decode(scores, task, cfg.thresholds)
    return track, scores, gate


FUSION_GRID = tuple(round(0.05 * i, 2) for i in range(21))


def fusion_sweep(task: TaskKind, video: Sequence[ScoreStream], audio: Sequence[ScoreStream],
                 truths: Sequence[LabelTrack], grid: Sequence[float] = FUSION_GRID) -> list[tuple[float, float]]:
    """Headline metric of ``w * video + (1 - w) * audio`` for each ``w`` in ``grid``."""
    from .metrics import report

    rows = []
    for w in grid:
        preds = [postprocess(task, v, PostConfig(fusion_w=w), a)[0] for v, a in zip(video, audio)]
        rows.append((float(w), report(preds, truths, label_task(task)).headline))
    return rows


def gather_training_data(model_task: TaskKind, videos: Sequence[Video], modality: str = "video",
                         temporal: bool = False, vd_cfg: VdWindowConfig = VdWindowConfig()):
    """Stack annotated frames (or training clips) into arrays for :func:`nn.train`.

    Returns ``(x, y, groups, valid)``.
    """
    xs, ys, groups, valid = [], [], [], []
    for gi, v in enumerate(videos):
        if v.labels is None:
            raise ConfigError(f"training video {v.video_id} has no labels")
        feats = v.audio if modality == "audio" else v.features
        if feats is None:
            raise ConfigError(f"video {v.video_id} has no {modality} features")
        if temporal:
            for clip in vd_make_clips(feats, vd_cfg, train_mode=True):
                xs.append(clip.features)
                ys.append(v.labels.labels[clip.index_map])
                valid.append(v.labels.mask[clip.index_map])
        else:
            m = v.labels.mask
            xs.append(feats.features[m])
            ys.append(v.labels.labels[m])
            groups.append(np.full(int(m.sum()), gi))
    if temporal:
        return np.stack(xs), np.stack(ys), None, np.stack(valid)
    return np.concatenate(xs), np.concatenate(ys), np.concatenate(groups), None
