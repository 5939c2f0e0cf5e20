import numpy as np
import pytest
from scipy.signal import welch

from respscreen.errors import InvalidParameter
from respscreen.ingest import assess_quality, read_wav
from respscreen.manifest import load_manifest, subject_labels
from respscreen.metrics import roc_auc
from respscreen.synthgen import SynthSpec, band_energy_ratio, build_entries, generate, synth_recording

SPEC = SynthSpec(n_subjects_per_class=6, recordings_per_subject=2, duration_s=20.0, seed=11)


def test_deterministic():
    a = synth_recording(SPEC, "A0001-1", True)
    b = synth_recording(SPEC, "A0001-1", True)
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, synth_recording(SPEC, "A0001-2", True))


def test_duration_and_level():
    x = synth_recording(SPEC, "N0000-1", False)
    assert len(x) == 20 * 16000
    assert 0.3 <= np.max(np.abs(x)) <= 0.7


@pytest.mark.parametrize("rid", ["A0000-1", "A0003-2", "A0005-1"])
def test_wheeze_snr(rid):
    # independent PSD estimate of the peak wheeze line over the in-band floor
    x = synth_recording(SPEC, rid, True)
    f, p = welch(x, fs=16000, nperseg=4096)
    band = (f >= 100) & (f <= 1000)
    excess = 10 * np.log10(p[band].max() / np.median(p[band]))
    assert 9.0 <= excess <= 12.0


def test_entries_shape():
    entries = build_entries(SPEC)
    assert len(entries) == 2 * 6 * 2
    labels = subject_labels([e for e, _ in entries])
    assert sum(labels.values()) == 6 and len(labels) == 12
    for e, asthma in entries:
        assert (e.diagnosis == "asthma") == asthma
        assert e.record_id.startswith(e.subject_id + "-")
        assert e.subject_id[0] == ("A" if asthma else "N")


def test_generate_passes_qc(tmp_path):
    spec = SynthSpec(n_subjects_per_class=2, recordings_per_subject=1, duration_s=16.0, seed=2)
    manifest = generate(spec, tmp_path)
    entries = load_manifest(manifest)
    assert len(entries) == 4
    for e in entries:
        rec = read_wav(tmp_path / e.audio_path)
        qc = assess_quality(rec)
        assert rec.sample_rate == 16000 and not qc.technical_defect and not qc.amplitude_defect


def test_trivial_detector_separates():
    spec = SynthSpec(n_subjects_per_class=15, recordings_per_subject=1, duration_s=16.0, seed=4)
    y, s = [], []
    for e, asthma in build_entries(spec):
        y.append(int(asthma))
        s.append(band_energy_ratio(synth_recording(spec, e.record_id, asthma), 16000))
    assert roc_auc(y, s) >= 0.95


@pytest.mark.parametrize(
    "kw", [{"n_subjects_per_class": 0}, {"duration_s": 15.0}, {"wheeze_freq_range": (1000, 100)}, {"sample_rate": 1000}]
)
def test_invalid(kw):
    with pytest.raises(InvalidParameter):
        SynthSpec(**kw).validate()
