"""Respiratory-sound asthma screening: audio QC, multi-window mel images,
a small numpy spectrogram transformer, prompt handling and screening metrics."""

__version__ = "0.1.0"
