import numpy as np
import pytest

from respscreen.errors import EmptyFeature, InvalidParameter
from respscreen.features import (
    FeatureParams,
    RgbSpectrogramImage,
    hz_to_mel,
    mel_center_frequencies,
    mel_filterbank,
    mel_spectrogram,
    multiwindow_rgb,
    read_image,
    stft_power,
    write_image,
)
from respscreen.ingest import Clip

from conftest import tone

SR = 16000


def clip_of(x, sr=SR):
    return Clip(np.asarray(x, dtype=np.float64), sr, "p", 0.0)


class TestStft:
    def test_zero_input(self):
        assert not stft_power(np.zeros(4000), SR, 25, 10).any()

    def test_sine_peak_bin(self):
        p = stft_power(tone(1000.0, 0.5, SR), SR, 25, 10)
        n_fft = 2 * (p.shape[1] - 1)
        assert n_fft == 512
        assert np.all(p.argmax(axis=1) == round(1000 * n_fft / SR))

    def test_frame_count(self):
        assert stft_power(np.zeros(5 * SR), SR, 25, 10).shape[0] == (80000 - 400) // 160 + 1 == 498

    def test_too_short(self):
        with pytest.raises(EmptyFeature):
            stft_power(np.zeros(100), SR, 25, 10)

    def test_quadratic_amplitude_scaling(self, rng):
        x = rng.standard_normal(8000)
        a = stft_power(x, SR, 25, 10)
        b = stft_power(3.7 * x, SR, 25, 10)
        assert abs(b.sum() / (3.7**2 * a.sum()) - 1) < 1e-9


class TestFilterbank:
    def test_rows(self):
        fb = mel_filterbank(2049, 128, 0, 8000, SR)
        assert fb.shape == (128, 2049)
        assert (fb >= 0).all()

    def test_htk_1000hz(self):
        assert abs(float(hz_to_mel(1000.0)) - 1000.0) < 0.1

    def test_centers_increasing_and_supports(self):
        fb = mel_filterbank(2049, 128, 0, 8000, SR)
        centers = mel_center_frequencies(128, 0, 8000)
        assert np.all(np.diff(centers) > 0)
        freqs = np.arange(2049) * SR / 4096
        edges = np.r_[0.0, centers, 8000.0]
        for m in range(128):
            nz = freqs[fb[m] > 0]
            assert nz.min() > edges[m] and nz.max() < edges[m + 2]

    def test_no_dead_bins(self):
        fb = mel_filterbank(2049, 128, 0, 8000, SR)
        freqs = np.arange(2049) * SR / 4096
        inside = (freqs > 0) & (freqs < 8000)
        assert (fb[:, inside].sum(axis=0) > 0).all()

    def test_empty_filters_rejected(self):
        with pytest.raises(InvalidParameter):
            mel_filterbank(257, 128, 0, 8000, SR)


class TestMelSpectrogram:
    def test_zero_clip(self):
        p = FeatureParams()
        m = mel_spectrogram(clip_of(np.zeros(SR)), p, 25)
        assert np.all(m.values == np.log(p.log_floor))

    def test_shape(self):
        m = mel_spectrogram(clip_of(np.zeros(5 * SR)), FeatureParams(), 25)
        assert m.values.shape == (498, 128)

    def test_sine_energy_band(self):
        m = mel_spectrogram(clip_of(tone(1000.0, 1.0, SR)), FeatureParams(), 100)
        # band whose HTK center is closest to 1000 Hz, from the closed form
        mels = np.linspace(0, 2595 * np.log10(1 + 8000 / 700), 130)[1:-1]
        centers = 700 * (10 ** (mels / 2595) - 1)
        target = int(np.argmin(np.abs(centers - 1000.0)))
        assert abs(int(m.values.mean(axis=0).argmax()) - target) <= 1

    def test_rejects_low_rate(self):
        with pytest.raises(InvalidParameter):
            mel_spectrogram(clip_of(np.zeros(8000), 8000), FeatureParams(), 25)


class TestRgb:
    def test_byte(self, rng):
        img = multiwindow_rgb(clip_of(rng.standard_normal(SR)), FeatureParams(), "byte")
        assert img.pixels.dtype == np.uint8
        for c in range(3):
            assert img.pixels[..., c].min() == 0 and img.pixels[..., c].max() == 255

    def test_unit(self, rng):
        img = multiwindow_rgb(clip_of(rng.standard_normal(SR)), FeatureParams(), "unit")
        assert img.pixels.min() >= 0 and img.pixels.max() <= 1
        for c in range(3):
            assert img.pixels[..., c].min() == 0 and img.pixels[..., c].max() == 1

    def test_shapes_and_channel_sources(self, rng):
        x = rng.uniform(-0.5, 0.5, 5 * SR)
        p = FeatureParams()
        img = multiwindow_rgb(clip_of(x), p, "unit")
        frames = [(5 * SR - round(w * 16)) // 160 + 1 for w in p.window_lengths_ms]
        assert img.shape == (128, min(frames)) == (128, 483)
        long_ = mel_spectrogram(clip_of(x), p, 175).values[:483].T[::-1]
        long_ = (long_ - long_.min()) / (long_.max() - long_.min())
        np.testing.assert_allclose(img.pixels[..., 2], long_)

    def test_white_noise_flat_profile(self, rng):
        img = multiwindow_rgb(clip_of(rng.uniform(-0.5, 0.5, 2 * SR)), FeatureParams(), "unit")
        # time-averaged profile of each channel varies little across the upper bands
        prof = img.pixels[:64].mean(axis=1)
        assert (prof.std(axis=0) < 0.1).all()

    def test_too_short(self):
        with pytest.raises(EmptyFeature):
            multiwindow_rgb(clip_of(np.zeros(int(0.17 * SR))), FeatureParams())

    def test_deterministic(self, rng):
        x = rng.standard_normal(SR)
        a = multiwindow_rgb(clip_of(x)).pixels
        b = multiwindow_rgb(clip_of(x.copy())).pixels
        assert a.tobytes() == b.tobytes()

    def test_constant_channel_zero(self):
        img = multiwindow_rgb(clip_of(np.zeros(SR)), FeatureParams(), "byte")
        assert not img.pixels.any()


class TestImageIo:
    @pytest.mark.parametrize("fmt", ["png", "tiff"])
    def test_roundtrip(self, tmp_path, rng, fmt):
        img = RgbSpectrogramImage(rng.integers(0, 256, (128, 498, 3), dtype=np.uint8), "byte")
        path = write_image(img, tmp_path / f"x.{fmt}")
        back = read_image(path)
        assert back.shape == (128, 498)
        np.testing.assert_array_equal(back.pixels, img.pixels)

    def test_png_equals_tiff(self, tmp_path, rng):
        img = RgbSpectrogramImage(rng.integers(0, 256, (16, 20, 3), dtype=np.uint8), "byte")
        a = read_image(write_image(img, tmp_path / "a.png"))
        b = read_image(write_image(img, tmp_path / "b.tiff"))
        np.testing.assert_array_equal(a.pixels, b.pixels)

    def test_unit_rejected(self, tmp_path):
        with pytest.raises(InvalidParameter):
            write_image(RgbSpectrogramImage(np.zeros((4, 4, 3)), "unit"), tmp_path / "a.png")

    def test_unwritable(self, tmp_path):
        img = RgbSpectrogramImage(np.zeros((4, 4, 3), np.uint8), "byte")
        with pytest.raises(OSError):
            write_image(img, tmp_path / "missing" / "a.png")


def test_params_validation():
    with pytest.raises(InvalidParameter):
        FeatureParams(window_lengths_ms=(100, 25, 175)).validate()
    with pytest.raises(InvalidParameter):
        FeatureParams(f_max=9000).validate(16000)
    p = FeatureParams()
    assert FeatureParams.from_dict(p.to_dict()) == p
