"""Acceptance criteria, one test each. A PASS/FAIL line per criterion is printed after the run."""

import json
import subprocess
import sys
import time

import numpy as np
import pytest

from respscreen.ast import AstConfig, AstModel, LoraSpec, class_attention_map, forward, lora_wrap, patchify
from respscreen.ast.model import EMBEDDING_PARAMS, LORA_SELECTORS, loss_and_grads
from respscreen.ast.train import AdamW, TrainConfig, clip_by_global_norm
from respscreen.features import FeatureParams, RgbSpectrogramImage, multiwindow_rgb, read_image
from respscreen.ingest import AudioRecording, assess_quality, read_wav, resample, segment_clips, trim_and_normalize
from respscreen.manifest import RECORDING_POINTS, SEXES, SplitSpec, stratified_subject_split, subject_labels
from respscreen.metrics import roc_auc
from respscreen.prompts import (
    ASTHMA,
    NOT_ASTHMA,
    PatientMetadata,
    ablation_specs,
    build_prompt,
    parse_diagnosis,
    render_diagnosis,
)
from respscreen.synthgen import SynthSpec, build_entries, synth_recording
from respscreen.vlm import AblationItem, DemographicsGatedBackend, OracleBackend, image_digest, run_ablation

from gradcheck import worst_relative_error

CLI = [sys.executable, "-m", "respscreen.cli"]


def cli(*argv):
    proc = subprocess.run(CLI + [str(a) for a in argv], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    return proc.stdout


@pytest.mark.slow
def test_1_end_to_end(tmp_path, acceptance):
    t0 = time.perf_counter()
    cli("synth", "--out", tmp_path / "synth")
    cli("qc", "--manifest", tmp_path / "synth/manifest.jsonl", "--out", tmp_path / "qc")
    cli("featurize", "--manifest", tmp_path / "qc/manifest.jsonl", "--out", tmp_path / "feat")
    cli("split", "--manifest", tmp_path / "qc/manifest.jsonl", "--out", tmp_path / "split")
    cli("train", "--features", tmp_path / "feat", "--split", tmp_path / "split/split.json", "--out", tmp_path / "model")
    cli("eval", "--checkpoint", tmp_path / "model/model.ckpt", "--features", tmp_path / "feat",
        "--split", tmp_path / "split/split.json", "--out", tmp_path / "eval")
    elapsed = time.perf_counter() - t0
    m = json.loads((tmp_path / "eval/metrics.json").read_text())
    epochs = len(json.loads((tmp_path / "model/history.json").read_text())["history"])
    acc, auc = m["argmax"]["accuracy"], m["roc_auc"]
    ok = acc >= 0.90 and auc >= 0.95 and elapsed <= 900 and epochs <= 20
    acceptance("1 end-to-end synthetic screening", ok,
               f"accuracy={acc:.4f} auc={auc:.4f} epochs={epochs} runtime={elapsed:.0f}s")
    assert ok


def test_2_gradient_check(acceptance):
    cfg = AstConfig(input_h=8, input_w=8, patch_h=4, patch_w=4, stride=4, embed_dim=8, n_heads=2, n_layers=1)
    model = AstModel.init(cfg, seed=0, dtype=np.float64)
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    err, where = worst_relative_error(model, rng.uniform(0, 1, (4, 8, 8, 3)), [0, 1, 1, 0])
    elapsed = time.perf_counter() - t0
    n = model.n_parameters()
    ok = err <= 1e-4 and elapsed <= 60
    acceptance("2 gradient correctness", ok, f"params={n} worst_rel={err:.2e} at {where} runtime={elapsed:.1f}s")
    assert ok


def _pairwise_auc(y, s):
    pos, neg = s[y == 1], s[y == 0]
    diff = pos[:, None] - neg[None, :]
    wins = 2 * np.count_nonzero(diff > 0) + np.count_nonzero(diff == 0)
    return wins / (2 * pos.size * neg.size)


def test_3_auc_oracle(acceptance):
    rng = np.random.default_rng(3)
    worst, tied = 0.0, 0
    for _ in range(1000):
        n = int(rng.integers(2, 201))
        y = rng.integers(0, 2, n)
        y[rng.choice(n, 2, replace=False)] = [0, 1]
        # few distinct levels so ties are common
        s = rng.integers(0, int(rng.integers(2, 30)), n) / 7.0
        tied += len(np.unique(s)) < n
        worst = max(worst, abs(roc_auc(y, s) - _pairwise_auc(y, s)))
    ok = worst <= 1e-12 and tied > 900
    acceptance("3 AUC oracle equivalence", ok, f"instances=1000 with_ties={tied} max_abs_diff={worst:.1e}")
    assert ok


def test_4_qc_boundaries(acceptance):
    failures = []
    sr = 16000
    # exact boundaries
    at_min = assess_quality(AudioRecording(np.full(14 * sr, 0.1), sr))
    if at_min.technical_defect:
        failures.append("14.0 s flagged")
    below = assess_quality(AudioRecording(np.full(14 * sr - 1, 0.1), sr))
    if not below.technical_defect:
        failures.append("14.0 s - 1 sample not flagged")
    x = np.full(5000, 0.1)
    x[:100] = -1.0
    exact = assess_quality(AudioRecording(x, sr))
    if exact.clip_fraction != 0.02 or exact.amplitude_defect:
        failures.append("clip fraction 0.02 flagged")
    x[100] = 0.999
    if not assess_quality(AudioRecording(x, sr)).amplitude_defect:
        failures.append("clip fraction 0.0202 not flagged")
    # randomized durations and clip counts
    rng = np.random.default_rng(4)
    for _ in range(500):
        rate = int(rng.choice([100, 1000, 8000]))
        n = int(rng.integers(1, 30 * rate))
        k = int(rng.integers(0, n + 1)) if rng.uniform() < 0.5 else int(round(0.02 * n + rng.integers(-2, 3)))
        k = min(max(k, 0), n)
        sig = rng.uniform(-0.9, 0.9, n)
        sig[rng.choice(n, k, replace=False)] = rng.choice([-1.0, 1.0, 0.9995], k)
        qc = assess_quality(AudioRecording(sig, rate))
        if qc.technical_defect != (n / rate < 14.0) or qc.amplitude_defect != (k / n > 0.02):
            failures.append(f"n={n} rate={rate} k={k}")
    ok = not failures
    acceptance("4 QC boundary exactness", ok, "boundaries + 500 random cases" if ok else "; ".join(failures[:3]))
    assert ok, failures


def test_5_lora_zero_init(acceptance):
    rng = np.random.default_rng(5)
    problems = []
    for i in range(50):
        heads = int(rng.choice([1, 2, 4]))
        patch = int(rng.choice([4, 8]))
        cfg = AstConfig(
            input_h=16, input_w=int(rng.choice([16, 24])), patch_h=patch, patch_w=patch,
            stride=int(rng.integers(patch // 2, patch + 1)), embed_dim=heads * int(rng.choice([4, 8])),
            n_heads=heads, n_layers=int(rng.integers(1, 3)), mlp_ratio=int(rng.integers(1, 4)),
        )
        k = int(rng.integers(1, len(LORA_SELECTORS) + 1))
        targets = tuple(rng.choice(LORA_SELECTORS, k, replace=False))
        spec = LoraSpec(rank=int(rng.integers(1, 5)), alpha=float(rng.uniform(0.5, 16)), target_selectors=targets)
        base = AstModel.init(cfg, seed=i, dtype=np.float64 if i % 2 else np.float32)
        wrapped = lora_wrap(base, spec, seed=i)
        x = rng.uniform(0, 1, (3, cfg.input_h, cfg.input_w, 3))
        if not np.array_equal(forward(base, x)[0], forward(wrapped, x)[0]):
            problems.append(f"config {i}: logits differ")
            continue
        tuned = wrapped.copy()
        opt = AdamW(TrainConfig(learning_rate=1e-2, warmup_steps=0))
        for _ in range(5):
            batch = rng.uniform(0, 1, (2, cfg.input_h, cfg.input_w, 3))
            _, grads = loss_and_grads(tuned, batch, [0, 1])
            clip_by_global_norm(grads, 1.0)
            opt.apply(tuned, grads, 1e-2)
        if tuned.frozen != wrapped.frozen:
            problems.append(f"config {i}: frozen set changed")
        for name in wrapped.frozen:
            if tuned.params[name].tobytes() != base.params[name].tobytes():
                problems.append(f"config {i}: base {name} changed")
        changed = {k for k in tuned.params if not np.array_equal(tuned.params[k], wrapped.params[k])}
        allowed = {k for k in tuned.params if ".lora_" in k} | set(EMBEDDING_PARAMS) | {"head.w", "head.b"}
        if not changed or changed - allowed:
            problems.append(f"config {i}: unexpected changes {sorted(changed - allowed)}")
    ok = not problems
    acceptance("5 LoRA zero-init equivalence", ok, "50 configs, 5 steps each" if ok else "; ".join(problems[:3]))
    assert ok, problems


def test_6_attention_contract(acceptance):
    rng = np.random.default_rng(6)
    worst_row, worst_map, bad_shape = 0.0, 0.0, 0
    for i in range(30):
        heads = int(rng.choice([1, 2, 4]))
        patch = int(rng.choice([4, 8]))
        cfg = AstConfig(
            input_h=int(rng.choice([16, 32])), input_w=int(rng.choice([16, 40])), patch_h=patch, patch_w=patch,
            stride=int(rng.integers(2, patch + 1)), embed_dim=8 * heads, n_heads=heads, n_layers=int(rng.integers(1, 4)),
        )
        model = AstModel.init(cfg, seed=i)
        img = RgbSpectrogramImage(rng.uniform(0, 1, (cfg.input_h, cfg.input_w, 3)), "unit")
        _, atts = forward(model, img)
        for a in atts:
            worst_row = max(worst_row, float(np.abs(a.astype(np.float64).sum(axis=-1) - 1).max()))
        _, grid = patchify(img, cfg)
        for layer in range(cfg.n_layers):
            amap = class_attention_map(atts, layer, cfg)
            bad_shape += amap.grid.shape != grid
            worst_map = max(worst_map, abs(float(amap.grid.sum()) - 1))
    ok = worst_row <= 1e-6 and worst_map <= 1e-6 and bad_shape == 0
    acceptance("6 attention-map contract", ok,
               f"30 models max_row_err={worst_row:.1e} max_map_err={worst_map:.1e} shape_mismatches={bad_shape}")
    assert ok


def _small_corpus_items():
    spec = SynthSpec(n_subjects_per_class=5, recordings_per_subject=1, duration_s=16.0, seed=7)
    items = []
    for entry, asthma in build_entries(spec):
        rec = AudioRecording(synth_recording(spec, entry.record_id, asthma), spec.sample_rate, entry.record_id)
        clip = segment_clips(trim_and_normalize(rec))[0]
        items.append(AblationItem(entry.record_id, multiwindow_rgb(clip), PatientMetadata.from_entry(entry), entry.label))
    return items


def test_7_ablation_collapse(tmp_path, acceptance):
    items = _small_corpus_items()
    oracle = OracleBackend({image_digest(it.image): it.label for it in items})
    res = run_ablation(items, DemographicsGatedBackend(oracle), ablation_specs("demographics"), tmp_path / "log.jsonl")
    n_pos = sum(it.label for it in items)
    full, ablated = res["full"].report, res["no_demographics"].report
    ok = ablated.counts.fn == n_pos and ablated.counts.tp == 0 and full.accuracy == 1.0
    acceptance("7 ablation collapse signature", ok,
               f"n_pos={n_pos} ablated_fn={ablated.counts.fn} full_accuracy={full.accuracy}")
    assert ok


def test_8_prompt_roundtrip(acceptance):
    rng = np.random.default_rng(8)
    alphabet = np.array(list("abcdefghij XYZ0123456789.,;:!?-_\n\t\"'{}[]()<>"))
    failures, leaks = 0, 0
    specs = ablation_specs("all")
    for i in range(1000):
        meta = PatientMetadata(str(rng.choice(SEXES)), int(rng.integers(0, 121)), str(rng.choice(RECORDING_POINTS)))
        spec = specs[i % len(specs)]
        prompt = build_prompt(meta, spec)
        label = ASTHMA if rng.uniform() < 0.5 else NOT_ASTHMA
        noise = ["".join(rng.choice(alphabet, int(rng.integers(0, 60)))) for _ in range(3)]
        # the reply may echo the prompt before answering
        raw = noise[0] + (prompt if i % 2 else "") + noise[1] + render_diagnosis(label) + noise[2]
        failures += parse_diagnosis(raw).label != label
        if not spec.include_demographics:
            leaks += any(m in prompt for m in ('"patient"', '"sex"', '"age"', "recording_point", f'"{meta.sex}"'))
        if not spec.include_technical:
            leaks += any(m in prompt for m in ("spectrogram", "window_ms", "hop_ms", "n_mels", "frequency_range_hz"))
    ok = failures == 0 and leaks == 0
    acceptance("8 prompt/parse round-trip", ok, f"1000 trials parse_failures={failures} ablation_leaks={leaks}")
    assert ok


def test_9_feature_determinism(tmp_path, acceptance):
    cli("synth", "--out", tmp_path / "synth", "--subjects-per-class", 2, "--recordings-per-subject", 1,
        "--duration", 16, "--seed", 9)
    manifest = tmp_path / "synth/manifest.jsonl"
    for run in ("a", "b"):
        cli("featurize", "--manifest", manifest, "--out", tmp_path / run, "--format", "both")
    cli("featurize", "--manifest", manifest, "--out", tmp_path / "u", "--encoding", "unit")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a/images").iterdir())
    identical = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)

    lossless, in_range = True, True
    rows = [json.loads(x) for x in (tmp_path / "a/clips.jsonl").read_text().splitlines()]
    unit_rows = {r["clip_id"]: r for r in map(json.loads, (tmp_path / "u/clips.jsonl").read_text().splitlines())}
    audio = {e.stem: read_wav(e) for e in (tmp_path / "synth/audio").iterdir()}
    for r in rows:
        rec = trim_and_normalize(resample(audio[r["record_id"]], 16000))
        clip = [c for c in segment_clips(rec) if c.start_offset_s == r["start_offset_s"]][0]
        expected = multiwindow_rgb(clip, FeatureParams(), "byte").pixels
        png = read_image(tmp_path / "a" / r["files"]["png"]).pixels
        tif = read_image(tmp_path / "a" / r["files"]["tiff"]).pixels
        lossless &= np.array_equal(png, expected) and np.array_equal(tif, expected)
        in_range &= png.dtype == np.uint8 and png.min() == 0 and png.max() == 255
        unit = np.load(tmp_path / "u" / unit_rows[r["clip_id"]]["files"]["npy"])
        lossless &= np.array_equal(unit, multiwindow_rgb(clip, FeatureParams(), "unit").pixels)
        in_range &= unit.min() == 0.0 and unit.max() == 1.0
    ok = identical and lossless and in_range and len(files) == 2 * len(rows) > 0
    acceptance("9 feature determinism and format fidelity", ok,
               f"files={len(files)} identical={identical} lossless={lossless} ranges_ok={in_range}")
    assert ok


def test_10_split_hygiene(acceptance):
    entries = [e for e, _ in build_entries(SynthSpec(n_subjects_per_class=160, recordings_per_subject=3))]
    # drop 30 asthma subjects so the classes are unequal before pooling
    entries = [e for e in entries if not (e.subject_id.startswith("A") and int(e.subject_id[1:]) >= 130)]
    labels = subject_labels(entries)
    overlaps, pool_ok = 0, True
    for seed in range(100):
        tr, te = stratified_subject_split(entries, SplitSpec(0.8, seed))
        overlaps += len(set(tr) & set(te))
        ptr, pte = stratified_subject_split(entries, SplitSpec(0.8, seed, pool_size_per_class=100))
        pooled = ptr + pte
        per_class = (sum(labels[s] for s in pooled), sum(1 - labels[s] for s in pooled))
        pool_ok &= per_class == (100, 100) and len(set(pooled)) == 200 and not set(ptr) & set(pte)
    ok = overlaps == 0 and pool_ok
    acceptance("10 split hygiene", ok, f"100 seeds overlaps={overlaps} pool_100_per_class={pool_ok}")
    assert ok
