"""Log-mel spectrograms and SpecAugment-style masking.

Front-end defaults: 64 mel bins, 25 ms Hann window, 10 ms hop, HTK mel scale
over 50-8000 Hz, natural log with a 1e-10 floor. These feed the built-in
backbone; precomputed embeddings bypass this module entirely.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import MODEL_RATE, SEGMENT_SAMPLES, Segment
from .errors import PreconditionError

MEL_BINS = 64
WIN_LENGTH = 400
HOP_LENGTH = 160
FMIN = 50.0
FMAX = 8000.0
LOG_FLOOR = 1e-10


@dataclass
class LogMelSpec:
    values: np.ndarray        # (frames, mel_bins)
    frame_hop: float          # seconds
    mel_bins: int


@dataclass
class SpecAugmentConfig:
    freq_param: int
    time_param: int
    num_masks_per_axis: int = 1

    def __post_init__(self):
        if self.freq_param < 0 or self.time_param < 0:
            raise PreconditionError("mask width parameters must be non-negative")
        if self.num_masks_per_axis < 1:
            raise PreconditionError("num_masks_per_axis must be at least 1")

    @property
    def disabled(self) -> bool:
        return self.freq_param == 0 and self.time_param == 0


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(mel_bins: int, n_fft: int, sample_rate: int = MODEL_RATE,
                   fmin: float = FMIN, fmax: float = FMAX) -> np.ndarray:
    """Triangular HTK-mel filters on rFFT bins, shape (mel_bins, n_fft//2 + 1)."""
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), mel_bins + 2))
    bin_freqs = np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)
    fb = np.zeros((mel_bins, len(bin_freqs)))
    for i in range(mel_bins):
        lo, mid, hi = edges[i], edges[i + 1], edges[i + 2]
        rising = (bin_freqs - lo) / (mid - lo)
        falling = (hi - bin_freqs) / (hi - mid)
        fb[i] = np.clip(np.minimum(rising, falling), 0.0, None)
    return fb


def _hann(n: int) -> np.ndarray:
    # periodic Hann, the STFT convention
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def log_mel(seg: Segment, mel_bins: int = MEL_BINS, win_length: int = WIN_LENGTH,
            hop_length: int = HOP_LENGTH) -> LogMelSpec:
    """Log-mel power spectrogram of one 5 s segment (no frame centering)."""
    if mel_bins < 1:
        raise PreconditionError("mel_bins must be at least 1")
    if not 0 < hop_length <= win_length <= SEGMENT_SAMPLES:
        raise PreconditionError(
            f"need 0 < hop ({hop_length}) <= win ({win_length}) <= {SEGMENT_SAMPLES}"
        )

    n_fft = 1
    while n_fft < win_length:
        n_fft *= 2

    frames = np.lib.stride_tricks.sliding_window_view(
        seg.samples, win_length)[::hop_length]
    spectrum = np.fft.rfft(frames * _hann(win_length), n=n_fft, axis=1)
    power = np.abs(spectrum) ** 2
    mel_power = power @ mel_filterbank(mel_bins, n_fft).T
    return LogMelSpec(values=np.log(mel_power + LOG_FLOOR),
                      frame_hop=hop_length / MODEL_RATE, mel_bins=mel_bins)


def spec_augment(spec: LogMelSpec, cfg: SpecAugmentConfig,
                 rng: np.random.Generator) -> LogMelSpec:
    """Mask random frequency bands and time spans with the spectrogram mean.

    Draw order is a determinism contract: all frequency masks first, then all
    time masks; per mask a width from [0, param] then a start over valid
    positions. A (0, 0) config returns the input unchanged without touching
    the random source.
    """
    if cfg.disabled:
        return spec

    values = spec.values.copy()
    fill = float(spec.values.mean())
    n_frames, n_bins = values.shape

    f_param = min(cfg.freq_param, n_bins)
    t_param = min(cfg.time_param, n_frames)
    if f_param > 0:
        for _ in range(cfg.num_masks_per_axis):
            width = int(rng.integers(0, f_param + 1))
            start = int(rng.integers(0, n_bins - width + 1))
            values[:, start : start + width] = fill
    if t_param > 0:
        for _ in range(cfg.num_masks_per_axis):
            width = int(rng.integers(0, t_param + 1))
            start = int(rng.integers(0, n_frames - width + 1))
            values[start : start + width, :] = fill
    return LogMelSpec(values=values, frame_hop=spec.frame_hop, mel_bins=spec.mel_bins)


def pooled_summary(values: np.ndarray) -> np.ndarray:
    """Time-mean and time-max pooling stacked into one feature vector."""
    return np.concatenate([values.mean(axis=0), values.max(axis=0)])


def dump_spectrogram_csv(spec: LogMelSpec, path) -> None:
    np.savetxt(path, spec.values, delimiter=",")
