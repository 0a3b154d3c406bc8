"""WAV decoding, 16 kHz resampling, and fixed 5-second segmentation.

All recordings are brought to 16 kHz and cut into 80,000-sample windows.
Training windows start every 2.5 s (40,000 samples); test windows are
back-to-back 5 s windows. Tails are zero-padded; training windows that are
at least half padding are dropped unless they are the only window.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, PreconditionError, UnsupportedError

MODEL_RATE = 16_000
SEGMENT_SAMPLES = 80_000          # 5 s at 16 kHz
TRAIN_STRIDE = 40_000             # 2.5 s at 16 kHz

SUPPORTED_RATES = (4000, 8000, 16000, 22050, 44100, 48000)

# Kaiser-windowed sinc interpolation kernel: 64 input-side taps, beta 8.6.
_KERNEL_HALF = 32
_KAISER_BETA = 8.6


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int
    recording_id: str

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if not np.issubdtype(self.samples.dtype, np.floating):
            self.samples = self.samples.astype(np.float64)
        if self.samples.size == 0:
            raise PreconditionError(f"waveform {self.recording_id!r} has no samples")
        if self.sample_rate <= 0:
            raise PreconditionError(f"waveform {self.recording_id!r} has non-positive sample rate")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class Segment:
    samples: np.ndarray
    recording_id: str
    start_sample: int
    padded_samples: int

    def __post_init__(self):
        if len(self.samples) != SEGMENT_SAMPLES:
            raise PreconditionError(
                f"segment of {self.recording_id!r} has {len(self.samples)} samples, "
                f"expected {SEGMENT_SAMPLES}"
            )
        if not 0 <= self.padded_samples < SEGMENT_SAMPLES:
            raise PreconditionError(f"padded_samples {self.padded_samples} out of range")


def _read_chunk_header(buf: bytes, off: int, path) -> tuple[bytes, int]:
    if off + 8 > len(buf):
        raise FormatError(f"{path}: truncated chunk header at offset {off}")
    cid, size = struct.unpack_from("<4sI", buf, off)
    return cid, size


def decode_wav(path) -> Waveform:
    """Decode a mono RIFF/WAVE file with PCM16 or IEEE-float32 samples.

    int16 samples are scaled by 1/32768. Unknown chunks are skipped.
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 12:
        raise FormatError(f"{path}: too short to be a WAV file")
    if raw[0:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise FormatError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    data = None
    off = 12
    while off + 8 <= len(raw):
        cid, size = _read_chunk_header(raw, off, path)
        body = raw[off + 8 : off + 8 + size]
        if cid == b"fmt ":
            if len(body) < 16:
                raise FormatError(f"{path}: fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif cid == b"data":
            if len(body) < size:
                raise FormatError(f"{path}: data chunk declares {size} bytes, "
                                  f"only {len(body)} present")
            data = body
        # anything else (LIST, fact, ...) is skipped
        off += 8 + size + (size & 1)  # chunks are word-aligned

    if fmt is None:
        raise FormatError(f"{path}: missing fmt chunk")
    if data is None:
        raise FormatError(f"{path}: missing data chunk")

    audio_format, channels, sample_rate, _byte_rate, _block_align, bits = fmt
    if channels != 1:
        raise UnsupportedError(f"{path}: {channels} channels; only mono is supported")

    if audio_format == 1 and bits == 16:
        if len(data) % 2:
            raise FormatError(f"{path}: PCM16 data chunk has odd byte count")
        samples = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
    elif audio_format == 3 and bits == 32:
        if len(data) % 4:
            raise FormatError(f"{path}: float32 data chunk size not a multiple of 4")
        samples = np.frombuffer(data, dtype="<f4").astype(np.float64)
    else:
        raise UnsupportedError(
            f"{path}: format code {audio_format} with {bits} bits is not supported "
            "(PCM16 or IEEE float32 only)"
        )

    if samples.size == 0:
        raise FormatError(f"{path}: data chunk holds no samples")
    return Waveform(samples=samples, sample_rate=sample_rate, recording_id=path.stem)


def wav_info(path) -> tuple[int, int]:
    """Return (sample_rate, sample_count) by parsing headers only."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(12)
        if len(head) < 12 or head[0:4] != b"RIFF" or head[8:12] != b"WAVE":
            raise FormatError(f"{path}: not a RIFF/WAVE file")
        sample_rate = None
        bits = None
        while True:
            hdr = fh.read(8)
            if len(hdr) < 8:
                break
            cid, size = struct.unpack("<4sI", hdr)
            if cid == b"fmt ":
                body = fh.read(size + (size & 1))
                if len(body) < 16:
                    raise FormatError(f"{path}: fmt chunk too short")
                _, channels, sample_rate, _, _, bits = struct.unpack_from("<HHIIHH", body, 0)
                if channels != 1:
                    raise UnsupportedError(f"{path}: only mono is supported")
            elif cid == b"data":
                if sample_rate is None:
                    raise FormatError(f"{path}: data chunk before fmt chunk")
                return sample_rate, size // (bits // 8)
            else:
                fh.seek(size + (size & 1), 1)
    raise FormatError(f"{path}: missing fmt or data chunk")


def _kaiser_sinc(offsets: np.ndarray, cutoff: float) -> np.ndarray:
    """Evaluate the anti-aliasing interpolation kernel at fractional offsets."""
    window = np.zeros_like(offsets)
    inside = np.abs(offsets) <= _KERNEL_HALF
    arg = 1.0 - (offsets[inside] / _KERNEL_HALF) ** 2
    window[inside] = np.i0(_KAISER_BETA * np.sqrt(arg)) / np.i0(_KAISER_BETA)
    return cutoff * np.sinc(cutoff * offsets) * window


def resample_to_16k(w: Waveform) -> Waveform:
    """Resample to 16 kHz by polyphase windowed-sinc interpolation.

    16 kHz input is returned unchanged (bit-equal). Output length is
    round(n * 16000 / input_rate).
    """
    if w.sample_rate not in SUPPORTED_RATES:
        raise UnsupportedError(f"sample rate {w.sample_rate} not supported; "
                               f"expected one of {SUPPORTED_RATES}")
    if w.sample_rate == MODEL_RATE:
        return w

    g = np.gcd(MODEL_RATE, w.sample_rate)
    up, down = MODEL_RATE // g, w.sample_rate // g  # out step = down/up input samples
    n = len(w.samples)
    out_len = int(round(n * MODEL_RATE / w.sample_rate))

    cutoff = min(1.0, up / down)  # relative to the input Nyquist
    x = np.concatenate([
        np.zeros(_KERNEL_HALF - 1),
        w.samples,
        np.zeros(_KERNEL_HALF + down + 1),
    ])
    windows = np.lib.stride_tricks.sliding_window_view(x, 2 * _KERNEL_HALF)

    out = np.empty(out_len, dtype=np.float64)
    offsets = np.arange(-(_KERNEL_HALF - 1), _KERNEL_HALF + 1, dtype=np.float64)
    for phase in range(up):
        ks = np.arange(phase, out_len, up)
        if ks.size == 0:
            continue
        t0 = phase * down / up
        base = int(np.floor(t0))
        frac = t0 - base
        taps = _kaiser_sinc(offsets - frac, cutoff)
        rows = windows[base + (ks // up) * down]
        out[ks] = rows @ taps

    return Waveform(samples=out, sample_rate=MODEL_RATE, recording_id=w.recording_id)


def train_window_starts(n_samples: int) -> list[int]:
    """Window starts under the training policy for a 16 kHz length.

    Candidates begin every 2.5 s while the start is inside the signal; windows
    that would be at least half zero-padding are dropped unless dropping them
    would leave no window at all.
    """
    if n_samples <= 0:
        raise PreconditionError("empty signal has no windows")
    candidates = [s for s in range(0, n_samples, TRAIN_STRIDE)]
    kept = [s for s in candidates if n_samples - s > SEGMENT_SAMPLES // 2]
    return kept if kept else [0]


def test_window_starts(n_samples: int) -> list[int]:
    """Window starts under the test policy: back-to-back 5 s windows, all kept."""
    if n_samples <= 0:
        raise PreconditionError("empty signal has no windows")
    return list(range(0, n_samples, SEGMENT_SAMPLES))


def _cut(w: Waveform, start: int) -> Segment:
    chunk = w.samples[start : start + SEGMENT_SAMPLES]
    pad = SEGMENT_SAMPLES - len(chunk)
    if pad:
        chunk = np.concatenate([chunk, np.zeros(pad, dtype=w.samples.dtype)])
    return Segment(samples=chunk, recording_id=w.recording_id,
                   start_sample=start, padded_samples=pad)


def segment_train(w: Waveform) -> list[Segment]:
    """Cut overlapping training windows (5 s every 2.5 s, padded tail)."""
    if w.sample_rate != MODEL_RATE:
        raise PreconditionError(f"expected {MODEL_RATE} Hz input, got {w.sample_rate}")
    return [_cut(w, s) for s in train_window_starts(len(w.samples))]


def segment_test(w: Waveform) -> list[Segment]:
    """Cut non-overlapping 5 s test windows; the padded tail is always kept."""
    if w.sample_rate != MODEL_RATE:
        raise PreconditionError(f"expected {MODEL_RATE} Hz input, got {w.sample_rate}")
    return [_cut(w, s) for s in test_window_starts(len(w.samples))]


def segment_key(start_sample: int) -> int:
    """Stable per-recording segment index: the start offset in 2.5 s units.

    Training windows map to consecutive integers, test windows to the even
    ones, so one embedding file can cover both policies without collisions.
    """
    return start_sample // TRAIN_STRIDE
