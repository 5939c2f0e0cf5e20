"""Log-mel spectrograms and the three-window RGB image encoding."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.signal import get_window

from .errors import EmptyFeature, InvalidParameter
from .ingest import Clip

ENCODINGS = ("unit", "byte")
IMAGE_FORMATS = {"png": "PNG", "tiff": "TIFF", "tif": "TIFF"}
MAX_N_FFT = 1 << 16


@dataclass(frozen=True)
class FeatureParams:
    window_lengths_ms: tuple[float, float, float] = (25.0, 100.0, 175.0)
    hop_ms: float = 10.0
    n_mels: int = 128
    f_min: float = 0.0
    f_max: float = 8000.0
    log_floor: float = 1e-10

    def validate(self, sample_rate: int | None = None) -> None:
        w = self.window_lengths_ms
        if len(w) != 3 or not (0 < w[0] < w[1] < w[2]):
            raise InvalidParameter(f"window lengths must be three strictly increasing values, got {w}")
        if self.hop_ms <= 0:
            raise InvalidParameter("hop must be positive")
        if self.n_mels < 1:
            raise InvalidParameter("n_mels must be >= 1")
        if not (0 <= self.f_min < self.f_max):
            raise InvalidParameter("need 0 <= f_min < f_max")
        if sample_rate is not None and self.f_max > sample_rate / 2:
            raise InvalidParameter(f"f_max {self.f_max} exceeds Nyquist for {sample_rate} Hz")
        if self.log_floor <= 0:
            raise InvalidParameter("log_floor must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["window_lengths_ms"] = list(self.window_lengths_ms)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureParams":
        d = dict(d)
        d["window_lengths_ms"] = tuple(float(v) for v in d["window_lengths_ms"])
        return cls(**d)


@dataclass(frozen=True)
class MelSpectrogram:
    values: np.ndarray  # [n_frames, n_mels]
    params: FeatureParams
    channel_window_ms: float


@dataclass(frozen=True)
class RgbSpectrogramImage:
    """``pixels`` is ``[n_mels, n_frames, 3]`` with row 0 the highest mel band."""

    pixels: np.ndarray
    encoding: str

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]

    def as_float(self) -> np.ndarray:
        if self.encoding == "byte":
            return self.pixels.astype(np.float64) / 255.0
        return np.asarray(self.pixels, dtype=np.float64)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def _ms_to_samples(ms: float, sample_rate: int) -> int:
    return int(round(ms * sample_rate / 1000.0))


def next_pow2(n: int) -> int:
    return 1 << max(0, int(n - 1).bit_length())


def stft_power(
    samples: np.ndarray,
    sample_rate: int,
    window_ms: float,
    hop_ms: float,
    n_fft: int | None = None,
) -> np.ndarray:
    """Hann-windowed power spectra, ``[n_frames, n_fft // 2 + 1]``.

    ``n_fft`` defaults to the next power of two at or above the window length.
    """
    win = _ms_to_samples(window_ms, sample_rate)
    hop = _ms_to_samples(hop_ms, sample_rate)
    if win < 1 or hop < 1:
        raise InvalidParameter("window and hop must span at least one sample")
    if n_fft is None:
        n_fft = next_pow2(win)
    elif n_fft < win:
        raise InvalidParameter(f"n_fft {n_fft} shorter than window {win}")
    x = np.asarray(samples, dtype=np.float64)
    if len(x) < win:
        raise EmptyFeature(f"signal of {len(x)} samples is shorter than a {win}-sample window")
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::hop]
    spec = np.fft.rfft(frames * get_window("hann", win), n=n_fft, axis=1)
    return spec.real**2 + spec.imag**2


def mel_filterbank(n_fft_bins: int, n_mels: int, f_min: float, f_max: float, sample_rate: int) -> np.ndarray:
    """HTK-scale triangular filters, ``[n_mels, n_fft_bins]``.

    ``n_fft_bins`` is the one-sided bin count (``n_fft // 2 + 1``).
    """
    if n_fft_bins < 2 or n_mels < 1 or not (0 <= f_min < f_max <= sample_rate / 2):
        raise InvalidParameter("invalid filterbank parameters")
    n_fft = 2 * (n_fft_bins - 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    edges[0], edges[-1] = f_min, f_max  # exact band edges; the mel round trip drifts by an ulp
    freqs = np.arange(n_fft_bins) * sample_rate / n_fft
    lo, center, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (center - lo)
    falling = (hi - freqs[None, :]) / (hi - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(~(fb > 0).any(axis=1))
    if empty.size:
        raise InvalidParameter(
            f"{empty.size} empty mel filter(s) (first {int(empty[0])}); n_fft {n_fft} too small for {n_mels} mels"
        )
    return fb


def mel_center_frequencies(n_mels: int, f_min: float, f_max: float) -> np.ndarray:
    return mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))[1:-1]


@lru_cache(maxsize=32)
def _resolved_filterbank(win: int, n_mels: int, f_min: float, f_max: float, sample_rate: int):
    # Smallest power-of-two n_fft >= win whose bin spacing leaves no mel filter empty.
    n_fft = next_pow2(win)
    while True:
        try:
            fb = mel_filterbank(n_fft // 2 + 1, n_mels, f_min, f_max, sample_rate)
        except InvalidParameter:
            if n_fft >= MAX_N_FFT:
                raise
            n_fft *= 2
            continue
        fb.setflags(write=False)
        return n_fft, fb


def mel_spectrogram(clip: Clip, params: FeatureParams, window_ms: float) -> MelSpectrogram:
    params.validate(clip.sample_rate)
    win = _ms_to_samples(window_ms, clip.sample_rate)
    n_fft, fb = _resolved_filterbank(win, params.n_mels, params.f_min, params.f_max, clip.sample_rate)
    power = stft_power(clip.samples, clip.sample_rate, window_ms, params.hop_ms, n_fft=n_fft)
    values = np.log(power @ fb.T + params.log_floor)
    return MelSpectrogram(values, params, float(window_ms))


def _normalize_channel(v: np.ndarray) -> np.ndarray:
    lo, hi = float(v.min()), float(v.max())
    if hi <= lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def multiwindow_rgb(clip: Clip, params: FeatureParams = FeatureParams(), encoding: str = "byte") -> RgbSpectrogramImage:
    """Stack short/medium/long-window log-mel spectrograms as R/G/B channels.

    All three use the same hop so frames align; they are cut to the shortest
    frame count and min-max scaled per channel.
    """
    if encoding not in ENCODINGS:
        raise InvalidParameter(f"encoding must be one of {ENCODINGS}")
    mels = [mel_spectrogram(clip, params, w).values for w in params.window_lengths_ms]
    n_frames = min(m.shape[0] for m in mels)
    # [frames, mels] -> [mels, frames], highest band on top
    channels = [_normalize_channel(m[:n_frames].T[::-1]) for m in mels]
    unit = np.stack(channels, axis=-1)
    if encoding == "unit":
        return RgbSpectrogramImage(unit, "unit")
    return RgbSpectrogramImage(np.round(unit * 255.0).astype(np.uint8), "byte")


def _pil_format(path: Path, fmt: str | None) -> str:
    key = (fmt or path.suffix.lstrip(".")).lower()
    if key not in IMAGE_FORMATS:
        raise InvalidParameter(f"unsupported image format {key!r}")
    return IMAGE_FORMATS[key]


def write_image(img: RgbSpectrogramImage, path: str | Path, fmt: str | None = None) -> Path:
    path = Path(path)
    if img.encoding != "byte":
        raise InvalidParameter("only byte-encoded images can be written to PNG/TIFF")
    pil_fmt = _pil_format(path, fmt)
    try:
        Image.fromarray(np.ascontiguousarray(img.pixels, dtype=np.uint8)).save(path, format=pil_fmt)
    except OSError as exc:
        raise OSError(f"cannot write image {path}: {exc}") from exc
    return path


def read_image(path: str | Path) -> RgbSpectrogramImage:
    with Image.open(path) as im:
        pixels = np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    return RgbSpectrogramImage(pixels, "byte")
