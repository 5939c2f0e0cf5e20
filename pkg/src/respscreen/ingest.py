"""WAV decoding, sample-rate harmonization, quality control and clip segmentation."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

from .errors import DecodeError, InvalidParameter

TARGET_SAMPLE_RATE = 16_000
MIN_DURATION_S = 14.0
CLIP_THRESHOLD = 0.02
CLIP_LEVEL = 0.999

_FMT_PCM = 0x0001
_FMT_FLOAT = 0x0003
_FMT_EXTENSIBLE = 0xFFFE


@dataclass(frozen=True)
class AudioRecording:
    samples: np.ndarray
    sample_rate: int
    source_id: str = ""

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class QcReport:
    duration_s: float
    clip_fraction: float
    technical_defect: bool
    amplitude_defect: bool
    decode_error: bool = False

    def to_json(self, record_id: str) -> dict:
        return {
            "id": record_id,
            "duration_s": self.duration_s,
            "clip_fraction": self.clip_fraction,
            "technical_defect": self.technical_defect,
            "amplitude_defect": self.amplitude_defect,
            "decode_error": self.decode_error,
        }


@dataclass(frozen=True)
class Clip:
    samples: np.ndarray = field(repr=False)
    sample_rate: int
    parent_id: str
    start_offset_s: float


def _iter_chunks(data: bytes):
    pos = 12
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        body = data[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise DecodeError(f"truncated {cid!r} chunk: {len(body)} of {size} bytes")
        yield cid, body
        pos += 8 + size + (size & 1)


def decode_wav(data: bytes, source_id: str = "") -> AudioRecording:
    """Decode a RIFF/WAVE byte string (integer PCM or 32/64-bit float) to mono."""
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise DecodeError("not a RIFF/WAVE stream")
    fmt = None
    payload = None
    for cid, body in _iter_chunks(data):
        if cid == b"fmt ":
            if len(body) < 16:
                raise DecodeError("fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
            if fmt[0] == _FMT_EXTENSIBLE:
                if len(body) < 26:
                    raise DecodeError("extensible fmt chunk too short")
                (sub,) = struct.unpack_from("<H", body, 24)
                fmt = (sub,) + fmt[1:]
        elif cid == b"data":
            payload = body
            break
    if fmt is None:
        raise DecodeError("missing fmt chunk")
    if payload is None:
        raise DecodeError("missing data chunk")

    tag, channels, rate, _, block_align, bits = fmt
    if channels < 1 or rate < 1:
        raise DecodeError(f"invalid channel count {channels} or rate {rate}")
    width = bits // 8
    if bits % 8 or block_align != width * channels:
        raise DecodeError(f"unsupported sample layout: {bits} bits, block {block_align}")
    if len(payload) % block_align:
        raise DecodeError("data chunk is not a whole number of frames")

    if tag == _FMT_PCM:
        if width == 1:
            x = (np.frombuffer(payload, dtype=np.uint8).astype(np.float64) - 128.0) / 128.0
        elif width == 2:
            x = np.frombuffer(payload, dtype="<i2").astype(np.float64) / 32768.0
        elif width == 3:
            raw = np.frombuffer(payload, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
            v = raw[:, 0] | (raw[:, 1] << 8) | (raw[:, 2] << 16)
            v = np.where(v >= 1 << 23, v - (1 << 24), v)
            x = v.astype(np.float64) / float(1 << 23)
        elif width == 4:
            x = np.frombuffer(payload, dtype="<i4").astype(np.float64) / float(1 << 31)
        else:
            raise DecodeError(f"unsupported PCM width {bits}")
    elif tag == _FMT_FLOAT and width in (4, 8):
        x = np.frombuffer(payload, dtype="<f4" if width == 4 else "<f8").astype(np.float64)
        if not np.all(np.isfinite(x)):
            raise DecodeError("non-finite float samples")
    else:
        raise DecodeError(f"unsupported format tag 0x{tag:04x} with {bits} bits")

    x = x.reshape(-1, channels).mean(axis=1)
    return AudioRecording(np.clip(x, -1.0, 1.0), int(rate), source_id)


def encode_wav(samples: np.ndarray, sample_rate: int, sample_format: str = "pcm16") -> bytes:
    """Encode samples (``[n]`` or ``[n, channels]``) as a WAV byte string."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    channels = x.shape[1]
    if sample_format == "pcm16":
        payload = np.round(np.clip(x, -1.0, 1.0) * 32767.0).astype("<i2").tobytes()
        tag, bits = _FMT_PCM, 16
    elif sample_format == "float32":
        payload = x.astype("<f4").tobytes()
        tag, bits = _FMT_FLOAT, 32
    else:
        raise InvalidParameter(f"unknown sample format {sample_format!r}")
    block = channels * bits // 8
    fmt = struct.pack("<HHIIHH", tag, channels, sample_rate, sample_rate * block, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) & 1:
        body += b"\x00"
    return b"RIFF" + struct.pack("<I", len(body)) + body


def read_wav(path: str | Path) -> AudioRecording:
    path = Path(path)
    return decode_wav(path.read_bytes(), source_id=path.stem)


def write_wav(path: str | Path, samples: np.ndarray, sample_rate: int, sample_format: str = "pcm16") -> None:
    Path(path).write_bytes(encode_wav(samples, sample_rate, sample_format))


def resample(rec: AudioRecording, target_hz: int = TARGET_SAMPLE_RATE) -> AudioRecording:
    """Polyphase resampling to ``target_hz``; output length is round(n * target / source)."""
    if target_hz <= 0:
        raise InvalidParameter(f"target rate must be positive, got {target_hz}")
    target_hz = int(target_hz)
    if rec.sample_rate == target_hz:
        return rec
    g = math.gcd(rec.sample_rate, target_hz)
    up, down = target_hz // g, rec.sample_rate // g
    n_out = int(round(len(rec.samples) * target_hz / rec.sample_rate))
    y = resample_poly(np.asarray(rec.samples, dtype=np.float64), up, down)
    if len(y) >= n_out:
        y = y[:n_out]
    else:
        y = np.pad(y, (0, n_out - len(y)))
    return AudioRecording(np.clip(y, -1.0, 1.0), target_hz, rec.source_id)


def assess_quality(
    rec: AudioRecording | None,
    min_duration_s: float = MIN_DURATION_S,
    clip_threshold: float = CLIP_THRESHOLD,
    clip_level: float = CLIP_LEVEL,
) -> QcReport:
    """Flag short/undecodable recordings and excessive clipping.

    Pass ``None`` for a recording that failed to decode. Both comparisons are
    strict, so exactly ``min_duration_s`` or exactly ``clip_threshold`` passes.
    """
    if rec is None:
        return QcReport(0.0, 0.0, technical_defect=True, amplitude_defect=False, decode_error=True)
    n = len(rec.samples)
    if n == 0:
        return QcReport(0.0, 0.0, technical_defect=True, amplitude_defect=False)
    duration = n / rec.sample_rate
    clipped = int(np.count_nonzero(np.abs(rec.samples) >= clip_level))
    fraction = clipped / n
    return QcReport(
        duration_s=duration,
        clip_fraction=fraction,
        technical_defect=duration < min_duration_s,
        amplitude_defect=fraction > clip_threshold,
    )


def trim_and_normalize(
    rec: AudioRecording,
    head_trim_s: float = 0.5,
    tail_trim_s: float = 0.5,
    peak_target: float = 0.99,
) -> AudioRecording:
    if head_trim_s < 0 or tail_trim_s < 0:
        raise InvalidParameter("trim durations must be non-negative")
    head = int(round(head_trim_s * rec.sample_rate))
    tail = int(round(tail_trim_s * rec.sample_rate))
    n = len(rec.samples)
    if head + tail >= n:
        raise InvalidParameter(
            f"trim {head_trim_s}+{tail_trim_s} s exceeds duration {rec.duration_s:.3f} s"
        )
    x = np.asarray(rec.samples[head : n - tail], dtype=np.float64)
    peak = float(np.max(np.abs(x)))
    if peak > 0.0:
        x = x * (peak_target / peak)
    return AudioRecording(x, rec.sample_rate, rec.source_id)


def segment_clips(rec: AudioRecording, clip_len_s: float = 5.0, hop_s: float = 5.0) -> list[Clip]:
    """Cut fixed-length clips at multiples of ``hop_s``; the trailing remainder is dropped."""
    if clip_len_s <= 0 or hop_s <= 0:
        raise InvalidParameter("clip length and hop must be positive")
    clip_n = int(round(clip_len_s * rec.sample_rate))
    hop_n = int(round(hop_s * rec.sample_rate))
    if clip_n < 1 or hop_n < 1:
        raise InvalidParameter("clip length and hop must span at least one sample")
    n = len(rec.samples)
    if n < clip_n:
        return []
    count = (n - clip_n) // hop_n + 1
    return [
        Clip(
            samples=rec.samples[k * hop_n : k * hop_n + clip_n],
            sample_rate=rec.sample_rate,
            parent_id=rec.source_id,
            start_offset_s=k * hop_n / rec.sample_rate,
        )
        for k in range(count)
    ]
