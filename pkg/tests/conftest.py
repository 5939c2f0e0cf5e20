import numpy as np
import pytest

from respscreen.ast import AstConfig, AstModel
from respscreen.ingest import AudioRecording

_ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def tone(freq, duration, sr, amp=0.5):
    t = np.arange(int(round(duration * sr))) / sr
    return amp * np.sin(2 * np.pi * freq * t)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return AstConfig(input_h=8, input_w=8, patch_h=4, patch_w=4, stride=4, embed_dim=8, n_heads=2, n_layers=1)


@pytest.fixture
def small_model():
    cfg = AstConfig(input_h=32, input_w=48, patch_h=8, patch_w=8, stride=8, embed_dim=16, n_heads=4, n_layers=2)
    return AstModel.init(cfg, seed=3)


@pytest.fixture
def noise_recording(rng):
    def make(duration, sr=16000, level=0.3):
        return AudioRecording(rng.uniform(-level, level, int(round(duration * sr))), sr, "rec")
    return make


@pytest.fixture
def acceptance():
    """Record one pass/fail line for an acceptance criterion."""
    def record(key: str, passed: bool, detail: str = ""):
        _ACCEPTANCE[key] = (bool(passed), detail)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE, key=lambda k: int(k.split()[0])):
        ok, detail = _ACCEPTANCE[key]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {key}  {detail}")
