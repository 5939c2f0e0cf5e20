"""Deterministic synthetic respiratory corpus.

Not-asthma recordings are band-limited noise shaped by a breathing envelope.
Asthma recordings add frequency-modulated tonal "wheezes" during expiration,
scaled so that the strongest spectral peak inside the wheeze band sits
``wheeze_snr_db`` above the median noise PSD in that band (Welch estimate,
4096-sample Hann segments, 50% overlap).
"""

from __future__ import annotations

import datetime as _dt
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.signal import butter, sosfilt

from .errors import InvalidParameter
from .ingest import write_wav
from .manifest import RecordEntry, write_manifest

PSD_SEGMENT = 4096
NOISE_BAND_HZ = (80.0, 2500.0)
_POINTS = (("trachea", 0.6), ("chest", 0.17), ("back", 0.15), ("mouth", 0.08))
# Source shares of the reference clinical corpus: 878/345/85/63/242 of 1613.
_DEVICES = (("specialized", 878), ("mobile", 345), ("web", 85), ("computer", 63), ("unknown", 242))


@dataclass(frozen=True)
class SynthSpec:
    n_subjects_per_class: int = 100
    recordings_per_subject: int = 2
    duration_s: float = 25.0
    sample_rate: int = 16000
    wheeze_freq_range: tuple[float, float] = (100.0, 1000.0)
    wheeze_snr_db: float = 10.0
    seed: int = 0

    def validate(self) -> None:
        if self.duration_s < 16:
            raise InvalidParameter("duration must be at least 16 s")
        lo, hi = self.wheeze_freq_range
        if not 0 < lo < hi < self.sample_rate / 2:
            raise InvalidParameter("wheeze band must lie strictly inside (0, Nyquist)")
        if hi > NOISE_BAND_HZ[1]:
            raise InvalidParameter(f"wheeze band must end below {NOISE_BAND_HZ[1]} Hz")
        if self.n_subjects_per_class < 1 or self.recordings_per_subject < 1:
            raise InvalidParameter("need at least one subject per class and one recording per subject")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["wheeze_freq_range"] = list(self.wheeze_freq_range)
        return d


def _rng(seed: int, key: str, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(key.encode("utf-8")), stream])


def welch_psd(x: np.ndarray, sample_rate: int, nperseg: int = PSD_SEGMENT) -> tuple[np.ndarray, np.ndarray]:
    """One-sided Welch PSD with Hann segments and 50% overlap."""
    win = np.hanning(nperseg + 1)[:-1]
    frames = np.lib.stride_tricks.sliding_window_view(np.asarray(x, dtype=np.float64), nperseg)[:: nperseg // 2]
    frames = frames - frames.mean(axis=1, keepdims=True)
    spec = np.abs(np.fft.rfft(frames * win, axis=1)) ** 2
    psd = spec.mean(axis=0) / (sample_rate * np.sum(win**2))
    psd[1:-1] *= 2.0
    return np.fft.rfftfreq(nperseg, 1.0 / sample_rate), psd


def _breath_phase(n: int, sr: int, rng) -> np.ndarray:
    period = rng.uniform(2.5, 4.0)
    t = np.arange(n) / sr
    return (t / period + rng.uniform()) % 1.0


def _envelopes(phase: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    inhale = phase < 0.4
    s_in = np.sin(np.pi * phase / 0.4) ** 2
    s_ex = np.sin(np.pi * (phase - 0.4) / 0.6) ** 2
    breath = np.where(inhale, 0.1 + 0.9 * s_in, 0.1 + 0.6 * s_ex)
    gate = np.where(inhale, 0.0, s_ex)
    return breath, gate


def _wheeze(n: int, sr: int, band: tuple[float, float], rng) -> np.ndarray:
    lo, hi = band
    t = np.arange(n) / sr
    out = np.zeros(n)
    for _ in range(int(rng.integers(1, 4))):
        depth = rng.uniform(0.01, 0.05)
        f0 = rng.uniform(lo * (1 + depth) + 5.0, hi * (1 - depth) - 5.0)
        rate = rng.uniform(0.2, 0.8)
        phi = rng.uniform(0, 2 * np.pi)
        inst = f0 * (1.0 + depth * np.sin(2 * np.pi * rate * t + phi))
        out += rng.uniform(0.5, 1.0) * np.sin(2 * np.pi * np.cumsum(inst) / sr + rng.uniform(0, 2 * np.pi))
    return out


def synth_recording(spec: SynthSpec, record_id: str, asthma: bool) -> np.ndarray:
    rng = _rng(spec.seed, record_id)
    sr = spec.sample_rate
    n = int(round(spec.duration_s * sr))
    sos = butter(4, NOISE_BAND_HZ, btype="bandpass", fs=sr, output="sos")
    noise = sosfilt(sos, rng.standard_normal(n + sr))[sr:]
    breath, gate = _envelopes(_breath_phase(n, sr, rng))
    noise = noise * breath
    x = noise
    if asthma:
        w = _wheeze(n, sr, spec.wheeze_freq_range, rng) * gate
        f, p_noise = welch_psd(noise, sr)
        _, p_w = welch_psd(w, sr)
        lo, hi = spec.wheeze_freq_range
        band = (f >= lo) & (f <= hi)
        floor = np.median(p_noise[band])
        gain = np.sqrt(10 ** (spec.wheeze_snr_db / 10.0) * floor / p_w[band].max())
        x = noise + gain * w
    level = rng.uniform(0.3, 0.7)
    return x * (level / np.max(np.abs(x)))


def _pick(rng, table) -> str:
    names = [k for k, _ in table]
    weights = np.array([w for _, w in table], dtype=np.float64)
    return names[int(rng.choice(len(names), p=weights / weights.sum()))]


def build_entries(spec: SynthSpec) -> list[tuple[RecordEntry, bool]]:
    spec.validate()
    base = _dt.date(2020, 1, 1)
    out = []
    for cls_tag, asthma in (("A", True), ("N", False)):
        for i in range(spec.n_subjects_per_class):
            sid = f"{cls_tag}{i:04d}"
            srng = _rng(spec.seed, sid, 1)
            sex = "female" if srng.uniform() < 542 / 1613 else "male"
            age = int(srng.integers(0, 48))
            diagnosis = "asthma" if asthma else ("healthy" if srng.uniform() < 133 / 500 else "other_pathology")
            device = _pick(srng, _DEVICES)
            for j in range(spec.recordings_per_subject):
                rid = f"{sid}-{j + 1}"
                rrng = _rng(spec.seed, rid, 2)
                date = base + _dt.timedelta(days=int(rrng.integers(0, 1500)))
                entry = RecordEntry(
                    record_id=rid,
                    subject_id=sid,
                    sex=sex,
                    age_years=age,
                    recording_point=_pick(rrng, _POINTS),
                    diagnosis=diagnosis,
                    record_date=date.isoformat(),
                    record_quality="good" if rrng.uniform() < 0.7 else "average",
                    source_device=device,
                    audio_path=f"audio/{rid}.wav",
                )
                out.append((entry, asthma))
    return out


def generate(spec: SynthSpec, out_dir: str | Path) -> Path:
    """Write ``audio/<record_id>.wav`` files and ``manifest.jsonl``; returns the manifest path."""
    out_dir = Path(out_dir)
    try:
        (out_dir / "audio").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc
    entries = build_entries(spec)
    for entry, asthma in entries:
        x = synth_recording(spec, entry.record_id, asthma)
        write_wav(out_dir / entry.audio_path, x, spec.sample_rate)
    manifest = out_dir / "manifest.jsonl"
    write_manifest([e for e, _ in entries], manifest)
    return manifest


def band_energy_ratio(samples: np.ndarray, sample_rate: int, band: tuple[float, float] = (100.0, 1000.0)) -> float:
    """Share of signal energy inside ``band``; a deliberately trivial wheeze detector."""
    spec = np.abs(np.fft.rfft(np.asarray(samples, dtype=np.float64))) ** 2
    f = np.fft.rfftfreq(len(samples), 1.0 / sample_rate)
    total = spec[1:].sum()
    return float(spec[(f >= band[0]) & (f <= band[1])].sum() / total) if total > 0 else 0.0
