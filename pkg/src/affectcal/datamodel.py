"""Shared data types and their on-disk formats.

Streams are stored as CSV with one leading ``# key=value ...`` metadata line,
a header row and one row per frame. Reals are written with ``repr`` so that a
save/load roundtrip is bit-exact. Manifests and calibration artifacts are JSON.
"""

from __future__ import annotations

import enum
import hashlib
import io
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, EmptyInputError, FormatError, IoError, OrderError, ShapeError


class TaskKind(str, enum.Enum):
    EXPR = "expr"
    VA = "va"
    AU = "au"
    VD = "vd"
    AUDIO = "audio"

    @property
    def num_outputs(self) -> int:
        return _NUM_OUTPUTS[self]

    @property
    def is_classification(self) -> bool:
        return self in (TaskKind.EXPR, TaskKind.VD, TaskKind.AUDIO)

    @classmethod
    def parse(cls, value: "str | TaskKind") -> "TaskKind":
        try:
            return cls(str(value.value if isinstance(value, TaskKind) else value).lower())
        except ValueError:
            raise ConfigError(f"unknown task {value!r}") from None


_NUM_OUTPUTS = {TaskKind.EXPR: 8, TaskKind.VA: 2, TaskKind.AU: 12, TaskKind.VD: 2, TaskKind.AUDIO: 8}


@dataclass(frozen=True)
class LabelSet:
    task: TaskKind
    names: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)


EXPR_LABELS = LabelSet(
    TaskKind.EXPR,
    ("Neutral", "Anger", "Disgust", "Fear", "Happiness", "Sadness", "Surprise", "Other"),
)
# Output order of the AffectNet-trained pretrained classifier.
AFFECTNET_LABELS = LabelSet(
    TaskKind.EXPR,
    ("Anger", "Contempt", "Disgust", "Fear", "Happiness", "Neutral", "Sadness", "Surprise"),
)
AU_LABELS = LabelSet(
    TaskKind.AU,
    ("AU1", "AU2", "AU4", "AU6", "AU7", "AU10", "AU12", "AU15", "AU23", "AU24", "AU25", "AU26"),
)
VA_LABELS = LabelSet(TaskKind.VA, ("valence", "arousal"))
VD_LABELS = LabelSet(TaskKind.VD, ("NonViolent", "Violent"))


def label_set(task: TaskKind) -> LabelSet:
    task = TaskKind.parse(task)
    if task in (TaskKind.EXPR, TaskKind.AUDIO):
        return EXPR_LABELS
    return {TaskKind.AU: AU_LABELS, TaskKind.VA: VA_LABELS, TaskKind.VD: VD_LABELS}[task]


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


def _check_frame_ids(frame_ids: np.ndarray) -> np.ndarray:
    frame_ids = np.asarray(frame_ids)
    if frame_ids.ndim != 1:
        raise ShapeError("frame_ids must be one-dimensional")
    if frame_ids.size and not np.issubdtype(frame_ids.dtype, np.integer):
        if not np.all(np.mod(frame_ids, 1) == 0):
            raise FormatError("frame_ids must be integers")
    frame_ids = frame_ids.astype(np.int64)
    if frame_ids.size and frame_ids.min() < 0:
        raise FormatError("frame_ids must be non-negative")
    if frame_ids.size > 1 and np.any(np.diff(frame_ids) <= 0):
        raise OrderError("frame_ids must be strictly increasing")
    return frame_ids


@dataclass(frozen=True, eq=False)
class FeatureStream:
    video_id: str
    frame_ids: np.ndarray
    features: np.ndarray
    source_tag: str = ""
    frame_rate_hz: float = 30.0

    def __post_init__(self):
        frame_ids = _check_frame_ids(self.frame_ids)
        features = np.asarray(self.features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] != frame_ids.size or features.shape[1] < 1:
            raise ShapeError(f"features shape {features.shape} does not match {frame_ids.size} frames")
        if not np.all(np.isfinite(features)):
            raise ValueError(f"non-finite feature value in stream {self.video_id!r}")
        if not self.frame_rate_hz > 0:
            raise ConfigError("frame_rate_hz must be positive")
        object.__setattr__(self, "frame_ids", _frozen(frame_ids))
        object.__setattr__(self, "features", _frozen(features))
        object.__setattr__(self, "frame_rate_hz", float(self.frame_rate_hz))

    def __len__(self) -> int:
        return self.frame_ids.size

    @property
    def dim(self) -> int:
        return self.features.shape[1]


SCORE_KINDS = ("probability", "logit", "continuous")


@dataclass(frozen=True, eq=False)
class ScoreStream:
    """Per-frame scores aligned to a feature timeline.

    ``multilabel`` marks probability streams whose channels are independent
    (sigmoid outputs) rather than a distribution over classes.
    """

    video_id: str
    frame_ids: np.ndarray
    scores: np.ndarray
    kind: str = "probability"
    multilabel: bool = False

    def __post_init__(self):
        if self.kind not in SCORE_KINDS:
            raise FormatError(f"unknown score kind {self.kind!r}")
        frame_ids = _check_frame_ids(self.frame_ids)
        scores = np.asarray(self.scores, dtype=np.float64)
        if scores.ndim != 2 or scores.shape[0] != frame_ids.size or scores.shape[1] < 1:
            raise ShapeError(f"scores shape {scores.shape} does not match {frame_ids.size} frames")
        if not np.all(np.isfinite(scores)):
            raise ValueError(f"non-finite score in stream {self.video_id!r}")
        if self.kind == "probability":
            if np.any(scores < 0) or (self.multilabel and np.any(scores > 1)):
                raise ValueError("probabilities must lie in [0, 1]")
            if not self.multilabel and scores.size and np.max(np.abs(scores.sum(axis=1) - 1)) > 1e-6:
                raise ValueError("probability rows must sum to 1")
        elif self.kind == "continuous" and np.any(np.abs(scores) > 1):
            raise ValueError("continuous scores must lie in [-1, 1]")
        object.__setattr__(self, "frame_ids", _frozen(frame_ids))
        object.__setattr__(self, "scores", _frozen(scores))
        object.__setattr__(self, "multilabel", bool(self.multilabel))

    def __len__(self) -> int:
        return self.frame_ids.size

    @property
    def num_classes(self) -> int:
        return self.scores.shape[1]

    def with_scores(self, scores: np.ndarray, kind: str | None = None) -> "ScoreStream":
        return ScoreStream(self.video_id, self.frame_ids, scores, kind or self.kind, self.multilabel)


@dataclass(frozen=True, eq=False)
class LabelTrack:
    """Per-frame ground truth (or predictions) for one task.

    ``labels`` is ``(n,)`` int for Expr/VD/Audio, ``(n, 12)`` int for AU and
    ``(n, 2)`` float for VA. ``mask`` is False on unannotated frames.
    """

    video_id: str
    task: TaskKind
    frame_ids: np.ndarray
    labels: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        task = TaskKind.parse(self.task)
        frame_ids = _check_frame_ids(self.frame_ids)
        n = frame_ids.size
        labels = np.asarray(self.labels)
        if task.is_classification:
            if labels.shape != (n,):
                raise ShapeError(f"class labels must have shape ({n},), got {labels.shape}")
            labels = _as_int(labels)
            if n and (labels.min() < 0 or labels.max() >= task.num_outputs):
                raise ValueError(f"class index outside [0, {task.num_outputs})")
        elif task == TaskKind.AU:
            if labels.shape != (n, 12):
                raise ShapeError(f"AU labels must have shape ({n}, 12), got {labels.shape}")
            labels = _as_int(labels)
            if np.any((labels != 0) & (labels != 1)):
                raise ValueError("AU labels must be 0/1")
        else:
            if labels.shape != (n, 2):
                raise ShapeError(f"VA labels must have shape ({n}, 2), got {labels.shape}")
            labels = labels.astype(np.float64)
            if not np.all(np.isfinite(labels)) or np.any(np.abs(labels) > 1):
                raise ValueError("VA labels must lie in [-1, 1]")
        mask = np.ones(n, dtype=bool) if self.mask is None else np.asarray(self.mask).astype(bool)
        if mask.shape != (n,):
            raise ShapeError("mask length must equal frame count")
        object.__setattr__(self, "task", task)
        object.__setattr__(self, "frame_ids", _frozen(frame_ids))
        object.__setattr__(self, "labels", _frozen(labels))
        object.__setattr__(self, "mask", _frozen(mask))

    def __len__(self) -> int:
        return self.frame_ids.size


def _as_int(a: np.ndarray) -> np.ndarray:
    if a.size and not np.issubdtype(a.dtype, np.integer):
        if not np.all(np.mod(a, 1) == 0):
            raise FormatError("expected integer labels")
    return a.astype(np.int64)


@dataclass(frozen=True)
class ManifestEntry:
    video_id: str
    feature_path: str
    label_path: str | None = None
    audio_feature_path: str | None = None
    audio_rate_hz: float | None = None
    pretrained_score_path: str | None = None


@dataclass(frozen=True)
class DatasetManifest:
    task: TaskKind
    split: str
    entries: tuple[ManifestEntry, ...]
    path: str | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "task", TaskKind.parse(self.task))
        object.__setattr__(self, "entries", tuple(self.entries))
        ids = [e.video_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate video_id in manifest {self.path or ''}".strip())


@dataclass(frozen=True, eq=False)
class ClassPriorTable:
    """Frame counts per class. For AU, ``counts`` are positives per channel
    and ``total`` is the number of annotated frames."""

    counts: np.ndarray
    total: int
    multilabel: bool = False

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if np.any(counts < 0):
            raise ValueError("counts must be non-negative")
        if not self.multilabel and int(counts.sum()) != int(self.total):
            raise ValueError("counts must sum to total")
        object.__setattr__(self, "counts", _frozen(counts))
        object.__setattr__(self, "total", int(self.total))

    @property
    def priors(self) -> np.ndarray:
        return self.counts / self.total


@dataclass
class CalibrationArtifact:
    task: TaskKind
    bias: list[float] | None = None
    thresholds: list[float] | None = None
    search_log: list[list] = field(default_factory=list)
    source_manifest_hash: str = ""
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.task = TaskKind.parse(self.task)
        if self.bias is not None:
            self.bias = [float(b) for b in self.bias]
            if len(self.bias) != self.task.num_outputs:
                raise ShapeError(f"bias length {len(self.bias)} != {self.task.num_outputs}")
        if self.thresholds is not None:
            self.thresholds = [float(t) for t in self.thresholds]
            if any(not 0.1 - 1e-12 <= t <= 0.9 + 1e-12 for t in self.thresholds):
                raise ValueError("thresholds must lie in [0.1, 0.9]")


# ---------------------------------------------------------------- CSV plumbing

def _format_meta(meta: dict) -> str:
    parts = []
    for key, value in meta.items():
        text = str(value)
        if any(ch.isspace() for ch in text) or "=" in text:
            raise FormatError(f"metadata value for {key!r} may not contain whitespace or '='")
        parts.append(f"{key}={text}")
    return "# " + " ".join(parts) + "\n"


def _fmt(v) -> str:
    return repr(float(v))


def _write_text(path, text: str) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _write_table(path, meta: dict, header: Sequence[str], columns: Sequence[list[str]]) -> None:
    buf = io.StringIO()
    buf.write(_format_meta(meta))
    buf.write(",".join(header) + "\n")
    for row in zip(*columns):
        buf.write(",".join(row) + "\n")
    _write_text(path, buf.getvalue())


def _read_table(path) -> tuple[dict, list[str], list[list[str]]]:
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except FileNotFoundError:
        raise ConfigError(f"file not found: {path}") from None
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if not lines or not lines[0].startswith("#"):
        raise FormatError(f"{path}: missing '# key=value' metadata line")
    meta = {}
    for token in lines[0][1:].split():
        key, sep, value = token.partition("=")
        if not sep:
            raise FormatError(f"{path}: malformed metadata token {token!r}")
        meta[key] = value
    if len(lines) < 2:
        raise FormatError(f"{path}: missing header row")
    header = lines[1].split(",")
    rows = [ln.split(",") for ln in lines[2:] if ln.strip()]
    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise FormatError(f"{path}: row {i + 1} has {len(row)} cells, header has {len(header)}")
    return meta, header, rows


def _parse_floats(path, rows: list[list[str]], cols: slice) -> np.ndarray:
    try:
        return np.array([[float(c) for c in row[cols]] for row in rows], dtype=np.float64)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


def _parse_ids(path, rows: list[list[str]]) -> np.ndarray:
    try:
        return np.array([int(row[0]) for row in rows], dtype=np.int64)
    except ValueError as exc:
        raise FormatError(f"{path}: bad frame_id: {exc}") from None


def _expect_header(path, header: list[str], expected: list[str]) -> None:
    if header[: len(expected)] != expected:
        raise FormatError(f"{path}: expected header {','.join(expected)}, got {','.join(header)}")


# ---------------------------------------------------------------- streams

def save_feature_stream(stream: FeatureStream, path) -> None:
    header = ["frame_id"] + [f"f{j}" for j in range(stream.dim)]
    columns = [[str(i) for i in stream.frame_ids.tolist()]]
    columns += [[_fmt(v) for v in col] for col in stream.features.T.tolist()]
    meta = {"video_id": stream.video_id, "rate_hz": _fmt(stream.frame_rate_hz), "source": stream.source_tag}
    _write_table(path, meta, header, columns)


def load_feature_stream(path) -> FeatureStream:
    meta, header, rows = _read_table(path)
    if len(header) < 2:
        raise FormatError(f"{path}: feature header needs at least one feature column")
    _expect_header(path, header, ["frame_id"] + [f"f{j}" for j in range(len(header) - 1)])
    try:
        video_id, rate = meta["video_id"], float(meta["rate_hz"])
    except (KeyError, ValueError):
        raise FormatError(f"{path}: metadata needs video_id and rate_hz") from None
    frame_ids = _parse_ids(path, rows)
    feats = _parse_floats(path, rows, slice(1, None)).reshape(len(rows), len(header) - 1)
    return FeatureStream(video_id, frame_ids, feats, meta.get("source", ""), rate)


def save_score_stream(stream: ScoreStream, path) -> None:
    header = ["frame_id"] + [f"s{j}" for j in range(stream.num_classes)]
    columns = [[str(i) for i in stream.frame_ids.tolist()]]
    columns += [[_fmt(v) for v in col] for col in stream.scores.T.tolist()]
    meta = {"video_id": stream.video_id, "kind": stream.kind, "multilabel": int(stream.multilabel)}
    _write_table(path, meta, header, columns)


def load_score_stream(path) -> ScoreStream:
    meta, header, rows = _read_table(path)
    if len(header) < 2:
        raise FormatError(f"{path}: score header needs at least one score column")
    _expect_header(path, header, ["frame_id"] + [f"s{j}" for j in range(len(header) - 1)])
    if "video_id" not in meta or "kind" not in meta:
        raise FormatError(f"{path}: metadata needs video_id and kind")
    scores = _parse_floats(path, rows, slice(1, None)).reshape(len(rows), len(header) - 1)
    return ScoreStream(meta["video_id"], _parse_ids(path, rows), scores, meta["kind"],
                       meta.get("multilabel", "0") == "1")


def _payload_header(task: TaskKind) -> list[str]:
    if task == TaskKind.AU:
        return [f"au{j}" for j in range(12)]
    if task == TaskKind.VA:
        return ["valence", "arousal"]
    return ["y"]


def save_label_track(track: LabelTrack, path, extra_columns: dict[str, Sequence[int]] | None = None) -> None:
    """Write a label track; ``extra_columns`` (e.g. a gate mask) are appended
    after the payload and ignored by :func:`load_label_track`."""
    header = ["frame_id", "mask"] + _payload_header(track.task)
    columns = [[str(i) for i in track.frame_ids.tolist()], [str(int(m)) for m in track.mask.tolist()]]
    labels = track.labels.reshape(len(track), -1)
    if track.task == TaskKind.VA:
        columns += [[_fmt(v) for v in col] for col in labels.T.tolist()]
    else:
        columns += [[str(int(v)) for v in col] for col in labels.T.tolist()]
    for name, values in (extra_columns or {}).items():
        if len(values) != len(track):
            raise ShapeError(f"extra column {name!r} has wrong length")
        header.append(name)
        columns.append([str(int(v)) for v in values])
    _write_table(path, {"video_id": track.video_id, "task": track.task.value}, header, columns)


def load_label_track(path, task: TaskKind | str | None = None) -> LabelTrack:
    meta, header, rows = _read_table(path)
    file_task = meta.get("task")
    if task is None and file_task is None:
        raise FormatError(f"{path}: task unknown (no task= metadata)")
    task = TaskKind.parse(task if task is not None else file_task)
    if file_task is not None and TaskKind.parse(file_task) != task:
        raise ConfigError(f"{path}: label track is for task {file_task}, expected {task.value}")
    expected = ["frame_id", "mask"] + _payload_header(task)
    _expect_header(path, header, expected)
    if "video_id" not in meta:
        raise FormatError(f"{path}: metadata needs video_id")
    n_payload = len(expected) - 2
    frame_ids = _parse_ids(path, rows)
    values = _parse_floats(path, rows, slice(1, 2 + n_payload)).reshape(len(rows), 1 + n_payload)
    mask = values[:, 0]
    if np.any((mask != 0) & (mask != 1)):
        raise FormatError(f"{path}: mask must be 0/1")
    payload = values[:, 1:]
    if task.is_classification:
        payload = payload[:, 0]
    return LabelTrack(meta["video_id"], task, frame_ids, payload, mask.astype(bool))


def load_label_extra(path, name: str) -> np.ndarray:
    _, header, rows = _read_table(path)
    if name not in header:
        raise FormatError(f"{path}: no column {name!r}")
    j = header.index(name)
    return np.array([int(r[j]) for r in rows], dtype=np.int64)


# ---------------------------------------------------------------- JSON

def _dump_json(obj, path) -> None:
    _write_text(path, json.dumps(obj, indent=2, sort_keys=False) + "\n")


def _load_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from None


def save_manifest(manifest: DatasetManifest, path) -> None:
    base = Path(path).resolve().parent

    def rel(p):
        if p is None:
            return None
        try:
            return os.path.relpath(Path(p).resolve(), base)
        except ValueError:
            return str(p)

    entries = []
    for e in manifest.entries:
        d = asdict(e)
        for key in ("feature_path", "label_path", "audio_feature_path", "pretrained_score_path"):
            d[key] = rel(d[key])
        entries.append(d)
    _dump_json({"task": manifest.task.value, "split": manifest.split, "entries": entries}, path)


def load_manifest(path, check_paths: bool = True) -> DatasetManifest:
    raw = _load_json(path)
    base = Path(path).resolve().parent
    try:
        task, split, raw_entries = raw["task"], raw["split"], raw["entries"]
    except (KeyError, TypeError):
        raise FormatError(f"{path}: manifest needs task, split and entries") from None
    entries = []
    for item in raw_entries:
        try:
            e = ManifestEntry(**item)
        except TypeError as exc:
            raise FormatError(f"{path}: bad manifest entry: {exc}") from None
        resolved = {}
        for key in ("feature_path", "label_path", "audio_feature_path", "pretrained_score_path"):
            p = getattr(e, key)
            if p is not None:
                p = str((base / p).resolve())
                if check_paths and not os.path.exists(p):
                    raise ConfigError(f"{path}: {key} for {e.video_id} does not exist: {p}")
            resolved[key] = p
        entries.append(ManifestEntry(e.video_id, resolved["feature_path"], resolved["label_path"],
                                     resolved["audio_feature_path"], e.audio_rate_hz,
                                     resolved["pretrained_score_path"]))
    return DatasetManifest(task, split, tuple(entries), str(path))


def manifest_hash(path) -> str:
    try:
        return hashlib.sha256(Path(path).read_bytes()).hexdigest()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc


def save_calibration(artifact: CalibrationArtifact, path) -> None:
    d = asdict(artifact)
    d["task"] = artifact.task.value
    _dump_json(d, path)


def load_calibration(path) -> CalibrationArtifact:
    raw = _load_json(path)
    try:
        return CalibrationArtifact(**raw)
    except TypeError as exc:
        raise FormatError(f"{path}: bad calibration artifact: {exc}") from None


# ---------------------------------------------------------------- operations

def align_audio_to_video(audio: FeatureStream, video_frame_ids, video_rate_hz: float) -> FeatureStream:
    """Nearest-timestamp resampling of an audio feature stream onto video frames.

    Ties go to the earlier audio row. Frames outside the audio span take the
    first or last audio row.
    """
    if len(audio) == 0:
        raise EmptyInputError(f"audio stream {audio.video_id!r} is empty")
    if not video_rate_hz > 0:
        raise ConfigError("video_rate_hz must be positive")
    vids = np.asarray(video_frame_ids, dtype=np.int64)
    ra, rv = audio.frame_rate_hz, float(video_rate_hz)
    # Compare times scaled by ra*rv to avoid dividing.
    a_scaled = audio.frame_ids.astype(np.float64) * rv
    v_scaled = vids.astype(np.float64) * ra
    hi = np.searchsorted(a_scaled, v_scaled, side="left")
    hi = np.clip(hi, 0, len(audio) - 1)
    lo = np.clip(hi - 1, 0, len(audio) - 1)
    d_lo = np.abs(v_scaled - a_scaled[lo])
    d_hi = np.abs(a_scaled[hi] - v_scaled)
    rows = np.where(d_lo <= d_hi, lo, hi)
    return FeatureStream(audio.video_id, vids, audio.features[rows], audio.source_tag, rv)


def class_priors(tracks: Sequence[LabelTrack], task: TaskKind | str) -> ClassPriorTable:
    task = TaskKind.parse(task)
    if task == TaskKind.VA:
        raise ConfigError("class priors are undefined for VA")
    if not tracks:
        raise EmptyInputError("no label tracks")
    k = task.num_outputs
    counts = np.zeros(k, dtype=np.int64)
    total = 0
    for tr in tracks:
        if tr.task != task:
            raise ConfigError(f"track {tr.video_id} is for task {tr.task.value}, expected {task.value}")
        lab = tr.labels[tr.mask]
        if task == TaskKind.AU:
            counts += lab.sum(axis=0)
        else:
            counts += np.bincount(lab, minlength=k)
        total += lab.shape[0]
    if total == 0:
        raise EmptyInputError("no annotated frames")
    return ClassPriorTable(counts, total, multilabel=task == TaskKind.AU)
