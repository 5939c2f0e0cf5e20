"""Batch command-line entry point: ``respscreen <command> [flags]``.

Commands communicate only through files. Every command writes
``run_config.json`` (the full parsed flag set) into its output directory.
Failures exit nonzero and print one JSON error object on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .ast import (
    AstConfig,
    AstModel,
    Dataset,
    LoraSpec,
    TrainConfig,
    class_attention_map,
    forward,
    load_checkpoint,
    lora_wrap,
    predict_proba,
    save_checkpoint,
    train,
    trainable_fraction,
)
from .ast.attention import write_attention_csv, write_attention_png
from .errors import DecodeError, RespScreenError
from .features import FeatureParams, RgbSpectrogramImage, multiwindow_rgb, read_image, write_image
from .ingest import assess_quality, read_wav, resample, segment_clips, trim_and_normalize
from .manifest import SplitSpec, load_manifest, split_subjects, stratified_subject_split, summarize, write_manifest
from .metrics import confusion, roc_auc, summarize as summarize_metrics, write_roc_csv, youden_threshold
from .prompts import PatientMetadata, ablation_specs, build_prompt, parse_diagnosis
from .synthgen import SynthSpec, generate
from .vlm import (
    AblationItem,
    DemographicsGatedBackend,
    FixedReplyBackend,
    HttpBackend,
    ImageRuleBackend,
    OracleBackend,
    image_digest,
    infer,
    run_ablation,
)

log = logging.getLogger("respscreen")


class CliError(RespScreenError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


def _read_jsonl(path: Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _snapshot(out: Path, args: argparse.Namespace) -> None:
    out.mkdir(parents=True, exist_ok=True)
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    cfg["version"] = __version__
    _write_json(out / "run_config.json", cfg)


def _require(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _windows(text: str) -> tuple[float, float, float]:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad window list {text!r}") from None
    if len(vals) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated window lengths")
    return vals


def _feature_params(args) -> FeatureParams:
    p = FeatureParams(
        window_lengths_ms=args.windows, hop_ms=args.hop_ms, n_mels=args.n_mels, f_min=args.fmin, f_max=args.fmax
    )
    p.validate()
    return p


def _resolve_audio(manifest: Path, audio_path: str) -> Path:
    p = Path(audio_path)
    return p if p.is_absolute() else (manifest.parent / p)


# ------------------------------------------------------------------ commands

def cmd_synth(args):
    out = Path(args.out)
    spec = SynthSpec(
        n_subjects_per_class=args.subjects_per_class,
        recordings_per_subject=args.recordings_per_subject,
        duration_s=args.duration,
        sample_rate=args.sample_rate,
        wheeze_snr_db=args.snr_db,
        seed=args.seed,
    )
    _snapshot(out, args)
    manifest = generate(spec, out)
    _write_json(out / "summary.json", summarize(load_manifest(manifest)))
    return {"manifest": str(manifest)}


def cmd_qc(args):
    manifest = _require(args.manifest, "manifest")
    out = Path(args.out)
    _snapshot(out, args)
    entries = load_manifest(manifest)
    kept, n_flagged = [], 0
    with open(out / "qc.jsonl", "w", encoding="utf-8") as fh:
        for e in entries:
            path = _resolve_audio(manifest, e.audio_path)
            try:
                rec = read_wav(path)
            except (DecodeError, OSError):
                rec = None
            qc = assess_quality(rec, args.min_duration, args.clip_threshold, args.clip_level)
            fh.write(json.dumps(qc.to_json(e.record_id)) + "\n")
            bad = qc.technical_defect or qc.amplitude_defect or e.record_quality == "poor"
            n_flagged += bad
            if not bad:
                kept.append(e.__class__(**{**e.to_dict(), "audio_path": str(path.resolve())}))
    write_manifest(kept, out / "manifest.jsonl")
    return {"records": len(entries), "kept": len(kept), "dropped": n_flagged}


def cmd_featurize(args):
    manifest = _require(args.manifest, "manifest")
    out = Path(args.out)
    params = _feature_params(args)
    _snapshot(out, args)
    (out / "images").mkdir(exist_ok=True)
    formats = ["png", "tiff"] if args.format == "both" else [args.format]
    rows = []
    for e in load_manifest(manifest):
        rec = read_wav(_resolve_audio(manifest, e.audio_path))
        rec = resample(rec, args.target_rate)
        rec = trim_and_normalize(rec, args.trim, args.trim)
        for k, clip in enumerate(segment_clips(rec, args.clip_seconds, args.hop_seconds or args.clip_seconds)):
            img = multiwindow_rgb(clip, params, args.encoding)
            cid = f"{e.record_id}__c{k:03d}"
            files = {}
            if args.encoding == "byte":
                for fmt in formats:
                    rel = f"images/{cid}.{fmt}"
                    write_image(img, out / rel, fmt)
                    files[fmt] = rel
            else:
                rel = f"images/{cid}.npy"
                np.save(out / rel, img.pixels)
                files["npy"] = rel
            rows.append({
                "clip_id": cid,
                "record_id": e.record_id,
                "subject_id": e.subject_id,
                "label": e.label,
                "start_offset_s": clip.start_offset_s,
                "files": files,
                "sex": e.sex,
                "age_years": e.age_years,
                "recording_point": e.recording_point,
            })
    with open(out / "clips.jsonl", "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r) + "\n")
    sidecar = {"feature_params": params.to_dict(), "encoding": args.encoding, "clip_seconds": args.clip_seconds,
               "target_rate": args.target_rate, "trim_s": args.trim, "formats": formats}
    _write_json(out / "features.json", sidecar)
    return {"clips": len(rows)}


def cmd_split(args):
    manifest = _require(args.manifest, "manifest")
    out = Path(args.out)
    spec = SplitSpec(args.train_fraction, args.seed, args.balance, args.pool_size)
    _snapshot(out, args)
    entries = load_manifest(manifest)
    train_s, test_s = stratified_subject_split(entries, spec)
    tr, te = set(train_s), set(test_s)
    split = {
        "train_subjects": train_s,
        "test_subjects": test_s,
        "train_records": sorted(e.record_id for e in entries if e.subject_id in tr),
        "test_records": sorted(e.record_id for e in entries if e.subject_id in te),
        "spec": {k: v for k, v in vars(args).items() if k != "func"},
    }
    _write_json(out / "split.json", split)
    return {"train_subjects": len(train_s), "test_subjects": len(test_s)}


def _load_clips(features: Path, subjects: set[str] | None = None) -> tuple[list[dict], np.ndarray]:
    rows = [r for r in _read_jsonl(_require(features / "clips.jsonl", "clip index"))
            if subjects is None or r["subject_id"] in subjects]
    if not rows:
        return rows, np.zeros((0, 0, 0, 3), dtype=np.uint8)
    imgs = []
    for r in rows:
        f = r["files"]
        if "npy" in f:
            imgs.append(np.load(features / f["npy"]).astype(np.float32))
        else:
            imgs.append(read_image(features / (f.get("png") or f["tiff"])).pixels)
    return rows, np.stack(imgs)


def cmd_train(args):
    features = _require(args.features, "features directory")
    split = json.loads(_require(args.split, "split file").read_text(encoding="utf-8"))
    out = Path(args.out)
    _snapshot(out, args)
    rows, images = _load_clips(features, set(split["train_subjects"]))
    if not rows:
        raise CliError("no training clips for the split's train subjects")
    labels = np.array([r["label"] for r in rows])
    by_subject = {r["subject_id"]: r["label"] for r in rows}
    fit_s, val_s = split_subjects(by_subject, SplitSpec(1.0 - args.val_fraction, args.seed))
    val_mask = np.isin([r["subject_id"] for r in rows], val_s)

    if args.init_checkpoint:
        model = load_checkpoint(_require(args.init_checkpoint, "initial checkpoint"))
    else:
        cfg = AstConfig(
            input_h=images.shape[1], input_w=images.shape[2], patch_h=args.patch, patch_w=args.patch,
            stride=args.stride, embed_dim=args.embed_dim, n_heads=args.heads, n_layers=args.layers,
        )
        model = AstModel.init(cfg, seed=args.seed)
    if args.lora_rank:
        model = lora_wrap(model, LoraSpec(args.lora_rank, args.lora_alpha, tuple(args.lora_targets.split(","))), args.seed)
    tc = TrainConfig(
        learning_rate=args.lr, weight_decay=args.weight_decay, grad_clip_norm=args.grad_clip,
        warmup_steps=args.warmup, schedule=args.schedule, max_epochs=args.epochs,
        early_stop_patience=args.patience, batch_size=args.batch_size, seed=args.seed,
    )
    result = train(model, Dataset(images[~val_mask], labels[~val_mask]), Dataset(images[val_mask], labels[val_mask]), tc)
    save_checkpoint(result.model, out / "model.ckpt", extra={"train_config": tc.to_dict()})
    hist = {
        "history": result.history,
        "best_epoch": result.best_epoch,
        "stopped_early": result.stopped_early,
        "trainable_fraction": trainable_fraction(result.model),
        "n_train_clips": int((~val_mask).sum()),
        "n_val_clips": int(val_mask.sum()),
        "val_subjects": val_s,
    }
    _write_json(out / "history.json", hist)
    return {"best_epoch": result.best_epoch, "epochs": len(result.history)}


def cmd_eval(args):
    features = _require(args.features, "features directory")
    split = json.loads(_require(args.split, "split file").read_text(encoding="utf-8"))
    model = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    out = Path(args.out)
    _snapshot(out, args)
    rows, images = _load_clips(features, set(split["test_subjects"]))
    if not rows:
        raise CliError("no test clips for the split's test subjects")
    labels = np.array([r["label"] for r in rows])
    scores = predict_proba(model, images)[:, 1]
    auc = roc_auc(labels, scores)
    argmax_pred = (scores > 0.5).astype(int)
    thr, _ = youden_threshold(labels, scores)
    youden_pred = (scores >= thr).astype(int)
    report = {
        "n_clips": len(rows),
        "n_subjects": len({r["subject_id"] for r in rows}),
        "roc_auc": auc,
        "argmax": summarize_metrics(confusion(labels, argmax_pred), auc).to_dict(),
        "youden_optimal": {
            "threshold": thr,
            "metrics": summarize_metrics(confusion(labels, youden_pred), auc).to_dict(),
        },
    }
    _write_json(out / "metrics.json", report)
    write_roc_csv(out / "roc.csv", labels, scores)
    with open(out / "predictions.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["clip_id", "subject_id", "label", "score_asthma"])
        for r, s in zip(rows, scores):
            w.writerow([r["clip_id"], r["subject_id"], r["label"], repr(float(s))])
    return {"accuracy": report["argmax"]["accuracy"], "roc_auc": auc}


def _load_any_image(path: Path) -> RgbSpectrogramImage:
    if path.suffix == ".npy":
        return RgbSpectrogramImage(np.load(path), "unit")
    return read_image(path)


def cmd_attention(args):
    model = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    img = _load_any_image(_require(args.image, "image"))
    out = Path(args.out)
    _snapshot(out, args)
    logits, attentions = forward(model, img)
    amap = class_attention_map(attentions, args.layer, model.config)
    write_attention_csv(amap, out / "attention.csv")
    write_attention_png(amap, out / "attention.png")
    return {"grid": list(amap.grid.shape), "layer": amap.source_layer, "logits": [float(v) for v in logits]}


def _meta(args) -> PatientMetadata:
    return PatientMetadata(args.sex, args.age, args.point)


def _ablate_choice(args) -> str:
    return args.ablate or "none"


def cmd_prompt(args):
    specs = ablation_specs(_ablate_choice(args), _feature_params(args))
    spec = specs[-1]
    text = build_prompt(_meta(args), spec)
    if args.out:
        out = Path(args.out)
        _snapshot(out, args)
        (out / "prompt.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return None


def _backend(args, items=None):
    if args.backend_url:
        return HttpBackend(args.backend_url, timeout=args.timeout, retries=args.retries)
    mock = args.mock
    if mock == "fixed":
        return FixedReplyBackend(args.reply)
    if mock == "rule":
        return ImageRuleBackend(args.rule_threshold)
    oracle = OracleBackend({image_digest(it.image): it.label for it in items or []})
    if mock == "oracle":
        return oracle
    if mock == "gated-oracle":
        return DemographicsGatedBackend(oracle)
    if mock == "gated-rule":
        return DemographicsGatedBackend(ImageRuleBackend(args.rule_threshold))
    raise CliError(f"unknown mock backend {mock!r}")


def cmd_infer(args):
    img = _load_any_image(_require(args.image, "image"))
    spec = ablation_specs(_ablate_choice(args), _feature_params(args))[-1]
    prompt = build_prompt(_meta(args), spec)
    raw = infer(_backend(args), img, prompt)
    result = {"raw_output": raw, "label": parse_diagnosis(raw).label, "prompt_spec": spec.name}
    if args.out:
        out = Path(args.out)
        _snapshot(out, args)
        _write_json(out / "inference.json", result)
    print(json.dumps(result, ensure_ascii=False))
    return None


def cmd_ablate(args):
    features = _require(args.features, "features directory")
    out = Path(args.out)
    _snapshot(out, args)
    subjects = None
    if args.split:
        subjects = set(json.loads(_require(args.split, "split file").read_text(encoding="utf-8"))["test_subjects"])
    rows, images = _load_clips(features, subjects)
    if not rows:
        raise CliError("no clips to evaluate")
    sidecar = json.loads((features / "features.json").read_text(encoding="utf-8"))
    params = FeatureParams.from_dict(sidecar["feature_params"])
    enc = sidecar.get("encoding", "byte")
    items = [
        AblationItem(r["clip_id"], RgbSpectrogramImage(img, enc),
                     PatientMetadata(r["sex"], r["age_years"], r["recording_point"]), int(r["label"]))
        for r, img in zip(rows, images)
    ]
    specs = ablation_specs(args.ablate or "all", params)
    results = run_ablation(items, _backend(args, items), specs, out / "run_log.jsonl", max_workers=args.workers)
    report = {name: res.to_dict() for name, res in results.items()}
    _write_json(out / "ablation.json", report)
    return {name: {"accuracy": r["metrics"]["accuracy"], "fn": r["metrics"]["counts"]["fn"]} for name, r in report.items()}


# ------------------------------------------------------------------ parser

def _add_feature_flags(p):
    p.add_argument("--windows", type=_windows, default=(25.0, 100.0, 175.0), help="three window lengths in ms")
    p.add_argument("--hop-ms", type=float, default=10.0)
    p.add_argument("--n-mels", type=int, default=128)
    p.add_argument("--fmin", type=float, default=0.0)
    p.add_argument("--fmax", type=float, default=8000.0)


def _add_meta_flags(p):
    p.add_argument("--sex", choices=["female", "male"], required=True)
    p.add_argument("--age", type=int, required=True)
    p.add_argument("--point", choices=["mouth", "trachea", "chest", "back"], required=True)


def _add_backend_flags(p, default_mock):
    p.add_argument("--backend-url", help="HTTP endpoint; overrides --mock")
    p.add_argument("--timeout", type=float, default=30.0)
    p.add_argument("--retries", type=int, default=2)
    p.add_argument("--mock", default=default_mock, choices=["fixed", "rule", "oracle", "gated-oracle", "gated-rule"])
    p.add_argument("--reply", default='{"diagnosis": "not asthma"}', help="reply for --mock fixed")
    p.add_argument("--rule-threshold", type=float, default=0.5)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="respscreen", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    common = _Parser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)
    _add = sub.add_parser
    sub.add_parser = lambda *a, **kw: _add(*a, parents=[common], **kw)

    p = sub.add_parser("synth", help="generate a synthetic labelled corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--subjects-per-class", type=int, default=100)
    p.add_argument("--recordings-per-subject", type=int, default=2)
    p.add_argument("--duration", type=float, default=25.0)
    p.add_argument("--sample-rate", type=int, default=16000)
    p.add_argument("--snr-db", type=float, default=10.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("qc", help="quality flags and filtered manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--min-duration", type=float, default=14.0)
    p.add_argument("--clip-threshold", type=float, default=0.02)
    p.add_argument("--clip-level", type=float, default=0.999)
    p.set_defaults(func=cmd_qc)

    p = sub.add_parser("featurize", help="clips -> RGB mel images")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--clip-seconds", type=float, default=5.0)
    p.add_argument("--hop-seconds", type=float, default=None)
    p.add_argument("--trim", type=float, default=0.5, help="seconds trimmed from each end")
    p.add_argument("--target-rate", type=int, default=16000)
    p.add_argument("--encoding", choices=["unit", "byte"], default="byte")
    p.add_argument("--format", choices=["png", "tiff", "both"], default="png")
    _add_feature_flags(p)
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("split", help="subject-level stratified train/test split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--balance", action="store_true")
    p.add_argument("--pool-size", type=int, default=None, help="subjects per class in the balanced pool")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train the spectrogram transformer")
    p.add_argument("--features", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--patch", type=int, default=16)
    p.add_argument("--stride", type=int, default=16)
    p.add_argument("--embed-dim", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--weight-decay", type=float, default=0.05)
    p.add_argument("--grad-clip", type=float, default=1.0)
    p.add_argument("--warmup", type=int, default=20)
    p.add_argument("--schedule", choices=["cosine", "constant"], default="cosine")
    p.add_argument("--patience", type=int, default=3)
    p.add_argument("--val-fraction", type=float, default=0.15)
    p.add_argument("--lora-rank", type=int, default=0, help="0 disables adapters")
    p.add_argument("--lora-alpha", type=float, default=8.0)
    p.add_argument("--lora-targets", default="qkv,out_proj,fc1,fc2")
    p.add_argument("--init-checkpoint", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="test-set screening metrics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attention", help="class-token attention heatmap for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--layer", type=int, default=-1)
    p.set_defaults(func=cmd_attention)

    p = sub.add_parser("prompt", help="print the structured prompt")
    _add_meta_flags(p)
    _add_feature_flags(p)
    p.add_argument("--ablate", choices=["demographics", "technical", "none"], default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_prompt)

    p = sub.add_parser("infer", help="query a multimodal backend for one image")
    p.add_argument("--image", required=True)
    _add_meta_flags(p)
    _add_feature_flags(p)
    p.add_argument("--ablate", choices=["demographics", "technical", "none"], default=None)
    p.add_argument("--out", default=None)
    _add_backend_flags(p, "rule")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("ablate", help="prompt-block ablations against a backend")
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default=None, help="restrict to the split's test subjects")
    p.add_argument("--ablate", choices=["demographics", "technical", "all", "none"], default="all")
    p.add_argument("--workers", type=int, default=1)
    _add_backend_flags(p, "gated-oracle")
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except CliError as exc:
        print(json.dumps({"error": "usage", "message": str(exc)}), file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        result = args.func(args)
    except (RespScreenError, OSError, ValueError, KeyError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "command": args.command}), file=sys.stderr)
        return 1
    if result is not None:
        print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
