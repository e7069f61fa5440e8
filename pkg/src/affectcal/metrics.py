"""Challenge metrics over masked frame streams: F1, accuracy, CCC."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .datamodel import LabelTrack, TaskKind
from .errors import AlignError, EmptyInputError, ShapeError

CCC_EPS = 1e-8


@dataclass
class MetricReport:
    task: TaskKind
    per_class_f1: list[float] = field(default_factory=list)
    macro_f1: float | None = None
    accuracy: float | None = None
    ccc_v: float | None = None
    ccc_a: float | None = None
    p_va: float | None = None
    support: list[int] = field(default_factory=list)
    num_frames_evaluated: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["task"] = TaskKind.parse(self.task).value
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @property
    def headline(self) -> float:
        """The task's official score: P_VA for VA, macro F1 otherwise."""
        return self.p_va if TaskKind.parse(self.task) == TaskKind.VA else self.macro_f1

    def to_text(self) -> str:
        rows = [("task", TaskKind.parse(self.task).value), ("frames", str(self.num_frames_evaluated))]
        for key in ("macro_f1", "accuracy", "ccc_v", "ccc_a", "p_va"):
            v = getattr(self, key)
            if v is not None:
                rows.append((key, f"{v:.4f}"))
        if self.per_class_f1:
            rows.append(("per_class_f1", " ".join(f"{v:.4f}" for v in self.per_class_f1)))
            rows.append(("support", " ".join(str(s) for s in self.support)))
        width = max(len(k) for k, _ in rows)
        return "".join(f"{k.ljust(width)}  {v}\n" for k, v in rows)


def _masked(pred, truth, mask):
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != pred.shape[:1]:
            raise ShapeError("mask length must equal frame count")
        pred, truth = pred[mask], truth[mask]
    if pred.shape[0] == 0:
        raise EmptyInputError("no annotated frames to evaluate")
    return pred, truth


def macro_f1(pred, truth, num_classes: int, mask=None) -> tuple[np.ndarray, float]:
    """Per-class F1 = 2TP/(2TP+FP+FN), 0 when undefined, and their unweighted mean over all classes."""
    pred, truth = _masked(pred, truth, mask)
    cm = kernels.confusion_matrix(pred.astype(np.int64), truth.astype(np.int64), num_classes)
    tp = np.diag(cm)
    return kernels.macro_from_counts(tp, cm.sum(axis=0) - tp, cm.sum(axis=1) - tp)


def multilabel_f1(pred, truth, mask=None) -> tuple[np.ndarray, float]:
    """Per-channel binary F1 and the macro mean (P_AU)."""
    pred, truth = _masked(pred, truth, mask)
    if pred.ndim != 2:
        raise ShapeError("multi-label predictions must be (frames, channels)")
    p, t = pred.astype(bool), truth.astype(bool)
    tp = np.count_nonzero(p & t, axis=0)
    fp = np.count_nonzero(p & ~t, axis=0)
    fn = np.count_nonzero(~p & t, axis=0)
    return kernels.macro_from_counts(tp, fp, fn)


def accuracy(pred, truth, mask=None) -> float:
    pred, truth = _masked(pred, truth, mask)
    return np.count_nonzero(pred == truth) / pred.shape[0]


def ccc(x, y) -> float:
    """Concordance correlation with population statistics.

    Returns 0 when both variances are below ``CCC_EPS``; ``CCC_EPS`` is a
    degeneracy guard, not an additive term, so ``ccc(x, x) == 1`` exactly.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeError(f"ccc needs two equal-length series, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise ShapeError("ccc needs at least two values")
    mx, my = x.mean(), y.mean()
    dx, dy = x - mx, y - my
    vx, vy = np.mean(dx * dx), np.mean(dy * dy)
    if vx < CCC_EPS and vy < CCC_EPS:
        return 0.0
    return float(2.0 * np.mean(dx * dy) / (vx + vy + (mx - my) ** 2))


# ---------------------------------------------------------------- reports

def _check_pair(p: LabelTrack, t: LabelTrack):
    if p.video_id != t.video_id or not np.array_equal(p.frame_ids, t.frame_ids):
        raise AlignError(f"prediction and truth timelines differ for {t.video_id!r}")


def _pool(preds: Sequence[LabelTrack], truths: Sequence[LabelTrack]):
    if len(preds) != len(truths):
        raise AlignError("different number of prediction and truth tracks")
    for p, t in zip(preds, truths):
        _check_pair(p, t)
    pred = np.concatenate([p.labels for p in preds])
    truth = np.concatenate([t.labels for t in truths])
    mask = np.concatenate([t.mask for t in truths])
    return pred, truth, mask


def classification_report(preds, truths, task: TaskKind) -> MetricReport:
    task = TaskKind.parse(task)
    pred, truth, mask = _pool(preds, truths)
    k = task.num_outputs
    per, macro = macro_f1(pred, truth, k, mask)
    return MetricReport(task, per.tolist(), macro, accuracy(pred, truth, mask),
                        support=np.bincount(truth[mask], minlength=k).tolist(),
                        num_frames_evaluated=int(mask.sum()))


def au_report(preds, truths) -> MetricReport:
    pred, truth, mask = _pool(preds, truths)
    per, macro = multilabel_f1(pred, truth, mask)
    return MetricReport(TaskKind.AU, per.tolist(), macro,
                        support=truth[mask].sum(axis=0).astype(int).tolist(),
                        num_frames_evaluated=int(mask.sum()))


def va_report(preds, truths) -> MetricReport:
    pred, truth, mask = _pool(preds, truths)
    pred, truth = _masked(pred, truth, mask)
    cv = ccc(pred[:, 0], truth[:, 0])
    ca = ccc(pred[:, 1], truth[:, 1])
    return MetricReport(TaskKind.VA, ccc_v=cv, ccc_a=ca, p_va=(cv + ca) / 2,
                        num_frames_evaluated=int(pred.shape[0]))


def report(preds, truths, task: TaskKind) -> MetricReport:
    task = TaskKind.parse(task)
    if task == TaskKind.VA:
        return va_report(preds, truths)
    if task == TaskKind.AU:
        return au_report(preds, truths)
    return classification_report(preds, truths, task)


def per_video_reports(preds, truths, task) -> list[tuple[str, MetricReport | None]]:
    """One report per video; videos without annotated frames get ``None``."""
    out = []
    for p, t in zip(preds, truths):
        try:
            out.append((t.video_id, report([p], [t], task)))
        except EmptyInputError:
            out.append((t.video_id, None))
    return out


def mean_of_videos(reports: list[MetricReport | None], task) -> MetricReport:
    """Average each scalar metric over videos (the non-pooled convention)."""
    valid = [r for r in reports if r is not None]
    if not valid:
        raise EmptyInputError("no video had annotated frames")
    task = TaskKind.parse(task)
    out = MetricReport(task, num_frames_evaluated=sum(r.num_frames_evaluated for r in valid))
    for key in ("macro_f1", "accuracy", "ccc_v", "ccc_a", "p_va"):
        vals = [getattr(r, key) for r in valid]
        if vals[0] is not None:
            setattr(out, key, float(np.mean(vals)))
    if valid[0].per_class_f1:
        out.per_class_f1 = np.mean([r.per_class_f1 for r in valid], axis=0).tolist()
        out.support = np.sum([r.support for r in valid], axis=0).astype(int).tolist()
    return out
