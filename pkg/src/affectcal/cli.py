"""Command-line entry point: ``affectcal <subcommand> [flags]``.

Each subcommand reads and writes the datamodel file formats, so stages compose
through files. Outputs are a function of inputs, flags and ``--seed``;
timestamps go only to a sidecar ``.log`` file next to the output.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .calibrate import GlaConfig, fit_logit_biases, tune_thresholds
from .datamodel import (
    CalibrationArtifact,
    TaskKind,
    _write_text,
    class_priors,
    load_calibration,
    load_label_track,
    load_manifest,
    load_score_stream,
    manifest_hash,
    save_calibration,
    save_label_track,
    save_score_stream,
)
from .errors import AffectCalError, ConfigError
from .metrics import mean_of_videos, per_video_reports, report
from .nn import LossSpec, TrainConfig, preset, save_loss_log, train
from .pipeline import (
    Model,
    PostConfig,
    fusion_sweep,
    gather_training_data,
    label_task,
    load_model,
    load_split,
    pmap,
    postprocess,
    save_model,
    score_split,
)
from .synth import SynthConfig, generate
from .temporal import SmoothingConfig, VdWindowConfig, blend, smooth

log = logging.getLogger("affectcal")

EXIT_CODES = {"config": 2, "format": 3, "divergence": 4, "coverage": 5}

DEFAULT_PRESET = {"expr": "expr", "audio": "audio", "va": "va", "au": "au", "vd": "tcn"}
DEFAULT_LOSS = {"expr": "weighted_softmax", "audio": "focal", "va": "mse_ccc",
                "au": "weighted_binary", "vd": "weighted_ce"}

# Default synthetic Expr set: long-tailed classes, audio and a pretrained stream.
DEFAULT_SYNTH = {
    "expr": dict(num_videos=20, class_weights=[0.5, 0.25, 0.1, 0.05, 0.04, 0.03, 0.02, 0.01],
                 feature_noise_sigma=1.1, audio_agreement=0.6, pretrained_confident_frac=0.3),
}


# ---------------------------------------------------------------- helpers

def _task(args, manifest=None) -> TaskKind:
    """Task from ``--task``, cross-checked against the manifest."""
    flag = TaskKind.parse(args.task) if args.task else None
    if manifest is None:
        if flag is None:
            raise ConfigError("--task is required")
        return flag
    if flag is None:
        return manifest.task
    if label_task(flag) != manifest.task:
        raise ConfigError(f"--task {flag.value} does not match manifest task {manifest.task.value}")
    return flag


def _require(args, *names):
    for name in names:
        if getattr(args, name, None) is None:
            raise ConfigError(f"--{name.replace('_', '-')} is required")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from None


def _vector(value, what: str) -> tuple[float, ...] | None:
    """A calibration artifact path or an inline comma-separated list."""
    if value is None:
        return None
    if Path(value).exists():
        art = load_calibration(value)
        vec = getattr(art, what)
        if vec is None:
            raise ConfigError(f"{value} has no {what}")
        return tuple(vec)
    return tuple(_floats(value))


def _load_scores_dir(directory, videos):
    out = []
    for v in videos:
        s = load_score_stream(Path(directory) / f"{v.video_id}.csv")
        if s.video_id != v.video_id or not np.array_equal(s.frame_ids, v.features.frame_ids):
            raise ConfigError(f"scores for {v.video_id} do not match the manifest's frames")
        out.append(s)
    return out


def _scores(videos, model_path, scores_dir, what: str):
    if scores_dir is not None:
        return _load_scores_dir(scores_dir, videos)
    if model_path is None:
        raise ConfigError(f"{what} needs a model or a scores directory")
    return score_split(load_model(model_path), videos)


def _video_scores(args, videos):
    return _scores(videos, args.model, args.scores, "video scoring")


def _audio_scores(args, videos):
    if args.audio_model is None and args.audio_scores is None:
        return None
    return _scores(videos, args.audio_model, args.audio_scores, "audio scoring")


def _truths(videos):
    if any(v.labels is None for v in videos):
        raise ConfigError("manifest entries need label files")
    return [v.labels for v in videos]


def _smoothing_T(args) -> int:
    return 0 if args.smooth_T is None else int(args.smooth_T)


def _out_dir(args) -> Path:
    _require(args, "out")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path, doc) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    _write_text(path, json.dumps(doc, indent=2) + "\n")


# ---------------------------------------------------------------- subcommands

def cmd_synth(args) -> int:
    task = TaskKind.parse(args.task or "expr")
    fields = dict(DEFAULT_SYNTH.get(task.value, {}))
    fields.update(args.synth or {})
    for flag, key in (("num_videos", "num_videos"), ("frames", "frames_per_video"),
                      ("noise_sigma", "feature_noise_sigma"), ("seed", "seed")):
        if getattr(args, flag) is not None:
            fields[key] = getattr(args, flag)
    known = {f.name for f in dataclasses.fields(SynthConfig)}
    unknown = set(fields) - known
    if unknown:
        raise ConfigError(f"unknown synth fields: {sorted(unknown)}")
    cfg = SynthConfig(task=task, **{k: v for k, v in fields.items() if k != "task"})
    out = _out_dir(args)
    for split in (args.splits or "train,val,test").split(","):
        m = generate(cfg, out, split.strip())
        print(f"{split}: {len(m.entries)} videos -> {out / (split.strip() + '.json')}")
    return 0


def cmd_train(args) -> int:
    _require(args, "manifest", "out")
    manifest = load_manifest(args.manifest)
    task = _task(args, manifest)
    videos = load_split(manifest, need_labels=True)
    modality = "audio" if task == TaskKind.AUDIO else "video"
    preset_name = args.preset or DEFAULT_PRESET[task.value]
    temporal = preset_name == "tcn"
    vd_cfg = VdWindowConfig(**(args.vd_window or {}))
    x, y, groups, valid = gather_training_data(task, videos, modality, temporal, vd_cfg)
    input_dim = x.shape[-1]
    spec = preset(preset_name, input_dim, hidden=args.hidden or 128, channels=args.channels or 256)
    if spec.output_dim != label_task(task).num_outputs:
        raise ConfigError(f"preset {preset_name} does not fit task {task.value}")
    loss = LossSpec(args.loss or DEFAULT_LOSS[task.value],
                    class_weight_mode=args.class_weight_mode or "inverse_frequency")
    cfg = TrainConfig(lr=args.lr or 1e-3, batch_size=args.batch_size or 256,
                      epochs=args.epochs if args.epochs is not None else 20,
                      seed=args.seed or 0, weight_decay=args.weight_decay or 0.0)
    priors = None
    if label_task(task) != TaskKind.VA:
        priors = class_priors([v.labels for v in videos], label_task(task))
    state, history = train(spec, loss, x, y, cfg, priors=priors,
                           groups=groups if loss.kind == "mse_ccc" else None, valid=valid)
    meta = {"task": task.value, "modality": modality, "preset": preset_name,
            "loss": dataclasses.asdict(loss.resolve(priors) if priors is not None else loss),
            "train_manifest_sha256": manifest_hash(args.manifest)}
    if priors is not None:
        meta["class_counts"] = priors.counts.tolist()
        meta["total"] = priors.total
    if temporal:
        meta["vd_window"] = dataclasses.asdict(vd_cfg)
    save_model(args.out, Model(spec, state, meta))
    out = Path(args.out)
    save_loss_log(history, out.with_name(out.stem + ".loss.csv"))
    print(f"trained {preset_name} for {cfg.epochs} epochs, final loss {history[-1][2]:.6f} -> {out}")
    return 0


def cmd_score(args) -> int:
    _require(args, "manifest", "model")
    manifest = load_manifest(args.manifest)
    videos = load_split(manifest)
    model = load_model(args.model)
    _task(args, manifest)
    out = _out_dir(args)
    for s in score_split(model, videos):
        save_score_stream(s, out / f"{s.video_id}.csv")
    print(f"scored {len(videos)} videos -> {out}")
    return 0


def cmd_calibrate(args) -> int:
    _require(args, "manifest", "out")
    manifest = load_manifest(args.manifest)
    task = label_task(_task(args, manifest))
    videos = load_split(manifest, need_labels=True)
    truths = _truths(videos)
    scores = _video_scores(args, videos)
    digest = manifest_hash(args.manifest)
    if task == TaskKind.EXPR:
        audio = _audio_scores(args, videos)
        if args.fusion_w is not None:
            if audio is None:
                raise ConfigError("--fusion-w needs --audio-model or --audio-scores")
            scores = [blend(a, b, args.fusion_w) for a, b in zip(scores, audio)]
        gla = GlaConfig(**(args.gla or {}))
        priors = None
        if gla.init == "prior":
            priors = load_model(args.model).priors if args.model else None
            if priors is None:
                log.info("no training priors available; using calibration-set priors")
                priors = class_priors(truths, task)
        art = fit_logit_biases(scores, truths, priors, gla, digest)
    elif task == TaskKind.AU:
        T = _smoothing_T(args)
        scores = [smooth(s, SmoothingConfig(T)) for s in scores]
        art = tune_thresholds(scores, truths, digest)
    else:
        raise ConfigError(f"calibration is defined for expr and au, not {task.value}")
    save_calibration(art, args.out)
    if art.bias is not None:
        print(f"macro-F1 {art.search_log[0][3]:.4f} -> {art.search_log[-1][3]:.4f}; bias -> {args.out}")
    else:
        print(f"thresholds {art.thresholds} -> {args.out}")
    for w in art.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return 0


def _post_config(args, task) -> PostConfig:
    return PostConfig(fusion_w=args.fusion_w, bias=_vector(args.bias, "bias"),
                      smooth_T=_smoothing_T(args), gate_p0=args.gate_p0,
                      thresholds=_vector(args.thresholds, "thresholds"))


def _run_post(task, videos, scores, audio, post: PostConfig):
    def one(i):
        return postprocess(task, scores[i], post, None if audio is None else audio[i], videos[i].pretrained)
    return pmap(one, list(range(len(videos))))


def cmd_predict(args) -> int:
    _require(args, "manifest")
    manifest = load_manifest(args.manifest)
    task = label_task(_task(args, manifest))
    videos = load_split(manifest)
    scores = _video_scores(args, videos)
    audio = _audio_scores(args, videos) if args.fusion_w is not None else None
    post = _post_config(args, task)
    out = _out_dir(args)
    results = _run_post(task, videos, scores, audio, post)
    if args.save_scores:
        (out / "scores").mkdir(exist_ok=True)
    for track, final, gate in results:
        extra = None if gate is None else {"gated": gate.astype(np.int64)}
        save_label_track(track, out / f"{track.video_id}.csv", extra)
        if args.save_scores:
            save_score_stream(final, out / "scores" / f"{track.video_id}.csv")
    print(f"wrote {len(results)} prediction tracks -> {out}")
    return 0


def cmd_fuse(args) -> int:
    _require(args, "manifest")
    manifest = load_manifest(args.manifest)
    task = label_task(_task(args, manifest))
    videos = load_split(manifest, need_labels=args.sweep)
    scores = _video_scores(args, videos)
    audio = _audio_scores(args, videos)
    if audio is None:
        raise ConfigError("fusion needs --audio-model or --audio-scores")
    if args.sweep:
        rows = [{"w": w, "score": v} for w, v in fusion_sweep(task, scores, audio, _truths(videos))]
        best = max(rows, key=lambda r: (r["score"], -r["w"]))
        for r in rows:
            print(f"w={r['w']:.2f}  {r['score']:.4f}")
        print(f"best w={best['w']:.2f}")
        if args.out:
            _write_json(args.out, {"grid": rows, "best_w": best["w"]})
        return 0
    w = 0.5 if args.fusion_w is None else args.fusion_w
    out = _out_dir(args)
    for a, b in zip(scores, audio):
        save_score_stream(blend(a, b, w), out / f"{a.video_id}.csv")
    print(f"blended {len(scores)} streams with w={w} -> {out}")
    return 0


def _report_rows(preds, truths, task, args):
    pooled = report(preds, truths, task)
    per_video = per_video_reports(preds, truths, task)
    if args.per_video_mean:
        pooled = mean_of_videos([r for _, r in per_video], task)
    return pooled, per_video


def _csv_line(name, r) -> str:
    if r is None:
        return f"{name},,,,,,0\n"
    vals = [r.macro_f1, r.accuracy, r.ccc_v, r.ccc_a, r.p_va]
    return name + "," + ",".join("" if v is None else repr(float(v)) for v in vals) + f",{r.num_frames_evaluated}\n"


CSV_HEADER = "video_id,macro_f1,accuracy,ccc_v,ccc_a,p_va,frames\n"


def cmd_evaluate(args) -> int:
    _require(args, "manifest", "pred")
    manifest = load_manifest(args.manifest)
    task = label_task(_task(args, manifest))
    truths = [load_label_track(e.label_path, task) for e in manifest.entries if e.label_path]
    if len(truths) != len(manifest.entries):
        raise ConfigError("every manifest entry needs a label file")
    preds = [load_label_track(Path(args.pred) / f"{t.video_id}.csv", task) for t in truths]
    pooled, per_video = _report_rows(preds, truths, task, args)
    print(pooled.to_text(), end="")
    if args.out:
        _write_text(args.out, pooled.to_json())
    if args.csv:
        lines = [CSV_HEADER] + [_csv_line(v, r) for v, r in per_video]
        lines.append(_csv_line("__mean__" if args.per_video_mean else "__pooled__", pooled))
        _write_text(args.csv, "".join(lines))
    return 0


ABLATE_STAGES = ("gla", "thresholds", "filtering", "smoothing", "fusion")


def _parse_variants(text: str) -> list[tuple[str, frozenset]]:
    out = []
    for name in text.split(","):
        name = name.strip()
        stages = frozenset() if name == "none" else frozenset(s.strip() for s in name.split("+"))
        bad = stages - set(ABLATE_STAGES)
        if bad:
            raise ConfigError(f"unknown ablation stage(s) {sorted(bad)}; choose from {ABLATE_STAGES}")
        out.append((name, stages))
    return out


def cmd_ablate(args) -> int:
    _require(args, "manifest", "calib_manifest")
    manifest = load_manifest(args.manifest)
    calib_manifest = load_manifest(args.calib_manifest)
    task = label_task(_task(args, manifest))
    if calib_manifest.task != task:
        raise ConfigError("calibration and evaluation manifests have different tasks")
    if task not in (TaskKind.EXPR, TaskKind.AU):
        raise ConfigError("ablation is defined for expr and au")
    has_audio = args.audio_model is not None
    default = ("none,gla,gla+filtering,gla+filtering+smoothing"
               + (",gla+filtering+smoothing+fusion" if has_audio else "")
               if task == TaskKind.EXPR else "none,thresholds,thresholds+smoothing")
    variants = _parse_variants(args.variants or default)
    _require(args, "model")
    videos = load_split(manifest, need_labels=True)
    calib = load_split(calib_manifest, need_labels=True)
    truths, calib_truths = _truths(videos), _truths(calib)
    model = load_model(args.model)
    audio_model = load_model(args.audio_model) if has_audio else None
    scores, calib_scores = score_split(model, videos), score_split(model, calib)
    audio = calib_audio = None
    if any("fusion" in s for _, s in variants):
        if audio_model is None:
            raise ConfigError("fusion variants need --audio-model")
        audio, calib_audio = score_split(audio_model, videos), score_split(audio_model, calib)
    w = 0.5 if args.fusion_w is None else args.fusion_w
    T = 8 if args.smooth_T is None else int(args.smooth_T)
    p0 = 0.9 if args.gate_p0 is None else args.gate_p0
    priors = model.priors or class_priors(calib_truths, task)
    digest = manifest_hash(args.calib_manifest)
    fitted: dict = {}

    def calibration(fused: bool, smoothed: bool) -> CalibrationArtifact:
        key = (fused, smoothed)
        if key not in fitted:
            cs = calib_scores
            if fused:
                cs = [blend(a, b, w) for a, b in zip(cs, calib_audio)]
            if task == TaskKind.EXPR:
                fitted[key] = fit_logit_biases(cs, calib_truths, priors, GlaConfig(**(args.gla or {})), digest)
            else:
                if smoothed:
                    cs = [smooth(s, SmoothingConfig(T)) for s in cs]
                fitted[key] = tune_thresholds(cs, calib_truths, digest)
        return fitted[key]

    rows = []
    for name, stages in variants:
        fused = "fusion" in stages
        smoothed = "smoothing" in stages
        bias = tuple(calibration(fused, False).bias) if "gla" in stages else None
        thresholds = tuple(calibration(fused, smoothed).thresholds) if "thresholds" in stages else None
        post = PostConfig(fusion_w=w if fused else None, bias=bias, smooth_T=T if smoothed else 0,
                          gate_p0=p0 if "filtering" in stages else None, thresholds=thresholds)
        preds = [r[0] for r in _run_post(task, videos, scores, audio if fused else None, post)]
        r = report(preds, truths, task)
        rows.append({"variant": name, "macro_f1": r.macro_f1, "accuracy": r.accuracy,
                     "frames": r.num_frames_evaluated})
    width = max(len(r["variant"]) for r in rows)
    print(f"{'variant'.ljust(width)}  macro_f1  accuracy")
    for r in rows:
        acc = "" if r["accuracy"] is None else f"{r['accuracy']:.4f}"
        print(f"{r['variant'].ljust(width)}  {r['macro_f1']:.4f}    {acc}")
    if args.out:
        _write_json(args.out, {"task": task.value, "smooth_T": T, "gate_p0": p0, "fusion_w": w,
                               "rows": rows})
    if args.csv:
        lines = ["variant,macro_f1,accuracy,frames\n"]
        for r in rows:
            acc = "" if r["accuracy"] is None else repr(r["accuracy"])
            lines.append(f"{r['variant']},{r['macro_f1']!r},{acc},{r['frames']}\n")
        _write_text(args.csv, "".join(lines))
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "score": cmd_score, "calibrate": cmd_calibrate,
            "predict": cmd_predict, "fuse": cmd_fuse, "evaluate": cmd_evaluate, "ablate": cmd_ablate}


# ---------------------------------------------------------------- argument parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="affectcal", description="Affect recognition heads, calibration and temporal post-processing.")
    parser.add_argument("--version", action="version", version=f"affectcal {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON file of flag values; explicit flags win")
        p.add_argument("--task", choices=[t.value for t in TaskKind])
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--log-level", default=None, choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    def sources(p, audio=True):
        p.add_argument("--model", help="trained head (JSON)")
        p.add_argument("--scores", help="directory of precomputed score streams")
        if audio:
            p.add_argument("--audio-model")
            p.add_argument("--audio-scores")
            p.add_argument("--fusion-w", type=float)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    common(p)
    p.add_argument("--num-videos", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--noise-sigma", type=float)
    p.add_argument("--splits")

    p = sub.add_parser("train", help="train a head on a manifest")
    common(p)
    p.add_argument("--manifest")
    p.add_argument("--preset")
    p.add_argument("--loss")
    p.add_argument("--class-weight-mode", choices=["inverse_frequency", "paper_literal"])
    p.add_argument("--hidden", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--weight-decay", type=float)

    p = sub.add_parser("score", help="write raw head outputs as score streams")
    common(p)
    p.add_argument("--manifest")
    p.add_argument("--model")

    p = sub.add_parser("calibrate", help="fit class biases (expr) or thresholds (au)")
    common(p)
    p.add_argument("--manifest")
    sources(p)
    p.add_argument("--smooth-T", type=int)

    p = sub.add_parser("predict", help="post-process scores and write label tracks")
    common(p)
    p.add_argument("--manifest")
    sources(p)
    p.add_argument("--bias", help="calibration JSON or comma-separated values")
    p.add_argument("--thresholds", help="calibration JSON or comma-separated values")
    p.add_argument("--smooth-T", type=int)
    p.add_argument("--gate-p0", type=float)
    p.add_argument("--save-scores", action="store_true", default=None)

    p = sub.add_parser("fuse", help="blend video and audio scores, or sweep the weight")
    common(p)
    p.add_argument("--manifest")
    sources(p)
    p.add_argument("--sweep", action="store_true", default=None)

    p = sub.add_parser("evaluate", help="score prediction tracks against labels")
    common(p)
    p.add_argument("--manifest")
    p.add_argument("--pred", help="directory of prediction tracks")
    p.add_argument("--csv")
    p.add_argument("--per-video-mean", action="store_true", default=None)

    p = sub.add_parser("ablate", help="compare pipeline variants")
    common(p)
    p.add_argument("--manifest")
    p.add_argument("--calib-manifest")
    p.add_argument("--model")
    p.add_argument("--audio-model")
    p.add_argument("--fusion-w", type=float)
    p.add_argument("--smooth-T", type=int)
    p.add_argument("--gate-p0", type=float)
    p.add_argument("--variants", help="comma-separated, stages joined by '+', e.g. none,gla,gla+smoothing")
    p.add_argument("--csv")
    return parser


# Keys only settable through --config (nested objects).
CONFIG_ONLY = ("synth", "gla", "vd_window")


def parse_args(argv=None) -> argparse.Namespace:
    args = build_parser().parse_args(argv)
    for key in CONFIG_ONLY:
        setattr(args, key, None)
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                cfg = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON: {exc}") from None
        if not isinstance(cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        for key, value in cfg.items():
            attr = key.replace("-", "_")
            if not hasattr(args, attr):
                raise ConfigError(f"config key {key!r} is not an option of {args.command}")
            if getattr(args, attr) is None:
                setattr(args, attr, value)
    return args


def _sidecar(args) -> Path | None:
    out = getattr(args, "out", None)
    if not out:
        return None
    p = Path(out)
    if p.suffix:
        return p.with_name(p.name + ".log")
    return p / "run.log"


def main(argv=None) -> int:
    started = time.time()
    handler = None
    try:
        args = parse_args(argv)
        level = getattr(logging, args.log_level or "WARNING")
        logging.basicConfig(format="%(levelname)s %(name)s: %(message)s")
        for h in logging.getLogger().handlers:
            h.setLevel(level)
        sidecar = _sidecar(args)
        if sidecar is not None:
            sidecar.parent.mkdir(parents=True, exist_ok=True)
            handler = logging.FileHandler(sidecar, mode="w", encoding="utf-8")
            handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
            log.addHandler(handler)
            log.setLevel(min(level, logging.INFO))
            log.info("affectcal %s %s (kernels: %s)", __version__, " ".join(argv if argv is not None else sys.argv[1:]), kernels.BACKEND)
        code = COMMANDS[args.command](args)
        log.info("finished in %.2fs", time.time() - started)
        return code
    except AffectCalError as exc:
        return _fail(exc.category, exc)
    except FloatingPointError as exc:
        return _fail("divergence", exc)
    except (ValueError, OSError) as exc:
        return _fail("format", exc)
    finally:
        if handler is not None:
            log.removeHandler(handler)
            handler.close()


def _fail(category: str, exc: Exception) -> int:
    msg = " ".join(str(exc).split())
    print(f"error: {category}: {msg}", file=sys.stderr)
    log.info("failed: %s: %s", category, msg)
    return EXIT_CODES.get(category, 1)


if __name__ == "__main__":
    sys.exit(main())
