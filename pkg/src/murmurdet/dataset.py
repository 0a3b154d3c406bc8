"""Patient metadata ingestion, stratified splits, class weights, synthetic
data generation, and the precomputed-embedding bridge format.

Class order is fixed everywhere: 0=Present, 1=Unknown, 2=Absent. Metric
weights and confusion-count layouts depend on it.
"""

from __future__ import annotations

import csv
import json
import math
import struct
import wave
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from .errors import FormatError, MetadataError, PreconditionError

SPLIT_FRACTIONS = (0.65, 0.10, 0.25)
FOLD_NAMES = ("train", "validation", "test")

EMBEDDING_MAGIC = b"HSEB"
EMBEDDING_VERSION = 1


class MurmurLabel(IntEnum):
    PRESENT = 0
    UNKNOWN = 1
    ABSENT = 2

    @classmethod
    def parse(cls, text: str) -> "MurmurLabel":
        try:
            return cls[text.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown murmur label {text!r}") from None

    @property
    def canonical(self) -> str:
        return self.name.capitalize()


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    label: MurmurLabel
    recording_ids: tuple[str, ...]

    def __post_init__(self):
        if not self.recording_ids:
            raise PreconditionError(f"patient {self.patient_id!r} has no recordings")
        if len(set(self.recording_ids)) != len(self.recording_ids):
            raise PreconditionError(f"patient {self.patient_id!r} repeats a recording id")


@dataclass
class Corpus:
    patients: list[PatientRecord]
    wav_paths: dict[str, Path]
    warnings: list[str] = field(default_factory=list)

    def by_id(self) -> dict[str, PatientRecord]:
        return {p.patient_id: p for p in self.patients}

    def label_of(self, patient_id: str) -> MurmurLabel:
        return self.by_id()[patient_id].label


def _check_unique_recordings(patients: list[PatientRecord], source: str) -> None:
    seen: dict[str, str] = {}
    for p in patients:
        for rid in p.recording_ids:
            if rid in seen:
                raise FormatError(
                    f"{source}: recording {rid!r} appears under patients "
                    f"{seen[rid]!r} and {p.patient_id!r}"
                )
            seen[rid] = p.patient_id


def _wav_readable(path: Path) -> bool:
    try:
        with open(path, "rb") as fh:
            head = fh.read(12)
    except OSError:
        return False
    return len(head) == 12 and head[0:4] == b"RIFF" and head[8:12] == b"WAVE"


def ingest_circor(directory) -> Corpus:
    """Scan a CirCor-style directory: one text file per patient plus WAVs.

    Only the header recording list and the `#Murmur:` line are used; other
    metadata lines are ignored. Patients whose recordings are all unreadable
    are skipped with a warning rather than failing the ingest.
    """
    directory = Path(directory)
    patients: list[PatientRecord] = []
    wav_paths: dict[str, Path] = {}
    warnings: list[str] = []

    for txt in sorted(directory.glob("*.txt")):
        lines = txt.read_text().splitlines()
        if not lines:
            raise MetadataError(f"{txt}: empty metadata file")
        header = lines[0].split()
        if len(header) < 2:
            raise MetadataError(f"{txt}: malformed header line {lines[0]!r}")
        patient_id = header[0]
        try:
            n_locations = int(header[1])
        except ValueError:
            raise MetadataError(f"{txt}: malformed header line {lines[0]!r}") from None

        wav_names = []
        for line in lines[1 : 1 + n_locations]:
            wav_names.extend(tok for tok in line.split() if tok.endswith(".wav"))

        murmur = None
        for line in lines:
            if line.lower().startswith("#murmur:"):
                murmur = line.split(":", 1)[1].strip()
                break
        if murmur is None:
            raise MetadataError(f"{txt}: missing '#Murmur:' line")
        try:
            label = MurmurLabel.parse(murmur)
        except ValueError:
            raise MetadataError(f"{txt}: unknown murmur value {murmur!r}") from None

        readable = []
        for name in wav_names:
            path = directory / name
            if _wav_readable(path):
                readable.append((Path(name).stem, path))
            else:
                warnings.append(f"{patient_id}: unreadable recording {name}")
        if not readable:
            warnings.append(f"skipping patient {patient_id}: no readable recordings")
            continue

        patients.append(PatientRecord(
            patient_id=patient_id, label=label,
            recording_ids=tuple(rid for rid, _ in readable)))
        wav_paths.update(readable)

    _check_unique_recordings(patients, str(directory))
    return Corpus(patients=patients, wav_paths=wav_paths, warnings=warnings)


MANIFEST_HEADER = ["patient_id", "label", "wav_path"]


def ingest_manifest(path) -> Corpus:
    """Read a `patient_id,label,wav_path` CSV. Relative wav paths are resolved
    against the manifest's directory. Patients come out sorted by id."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty manifest") from None
        if header != MANIFEST_HEADER:
            raise FormatError(f"{path}: expected header {','.join(MANIFEST_HEADER)}, "
                              f"got {','.join(header)}")
        rows = list(reader)

    grouped: dict[str, tuple[MurmurLabel, list[str]]] = {}
    wav_paths: dict[str, Path] = {}
    seen_rows = set()
    for lineno, row in enumerate(rows, start=2):
        if len(row) != 3:
            raise FormatError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
        pid, label_text, wav = row
        try:
            label = MurmurLabel.parse(label_text)
        except ValueError:
            raise FormatError(f"{path}:{lineno}: bad label {label_text!r}") from None
        if (pid, wav) in seen_rows:
            raise FormatError(f"{path}:{lineno}: duplicate row for ({pid}, {wav})")
        seen_rows.add((pid, wav))

        wav_path = Path(wav)
        if not wav_path.is_absolute():
            wav_path = path.parent / wav_path
        rid = wav_path.stem
        if pid in grouped:
            if grouped[pid][0] != label:
                raise FormatError(f"{path}:{lineno}: patient {pid} has conflicting labels")
            grouped[pid][1].append(rid)
        else:
            grouped[pid] = (label, [rid])
        wav_paths[rid] = wav_path

    patients = [
        PatientRecord(patient_id=pid, label=label, recording_ids=tuple(rids))
        for pid, (label, rids) in sorted(grouped.items())
    ]
    _check_unique_recordings(patients, str(path))
    return Corpus(patients=patients, wav_paths=wav_paths)


def export_manifest(corpus: Corpus, path) -> None:
    """Write the canonical manifest: patients sorted by id, recordings in order."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for p in sorted(corpus.patients, key=lambda p: p.patient_id):
            for rid in p.recording_ids:
                writer.writerow([p.patient_id, p.label.canonical,
                                 str(corpus.wav_paths[rid])])


@dataclass
class SplitAssignment:
    seed: int
    train: tuple[str, ...]
    validation: tuple[str, ...]
    test: tuple[str, ...]

    def fold(self, name: str) -> tuple[str, ...]:
        if name not in FOLD_NAMES:
            raise PreconditionError(f"unknown fold {name!r}")
        return getattr(self, name)


def _largest_remainder(n: int, fractions) -> list[int]:
    exact = [f * n for f in fractions]
    base = [math.floor(e) for e in exact]
    # hand out leftovers by largest fractional part; earlier fold wins ties
    order = sorted(range(len(fractions)), key=lambda i: (-(exact[i] - base[i]), i))
    for i in order[: n - sum(base)]:
        base[i] += 1
    return base


def stratified_split(patients: list[PatientRecord], seed: int,
                     fractions=SPLIT_FRACTIONS) -> SplitAssignment:
    """Shuffle each class independently and cut by largest-remainder rounding.

    Deterministic for a fixed seed and patient id set (input order is
    irrelevant: ids are sorted before shuffling).
    """
    if len(fractions) != 3 or any(f <= 0 for f in fractions) \
            or abs(sum(fractions) - 1.0) > 1e-9:
        raise PreconditionError(f"fractions must be 3 positive values summing to 1, "
                                f"got {fractions}")
    by_class: dict[MurmurLabel, list[str]] = {label: [] for label in MurmurLabel}
    for p in patients:
        by_class[p.label].append(p.patient_id)
    for label, ids in by_class.items():
        if len(ids) < 3:
            raise PreconditionError(
                f"class {label.canonical} has {len(ids)} patients; need at least 3")

    rng = np.random.default_rng(seed)
    folds: list[list[str]] = [[], [], []]
    for label in MurmurLabel:
        ids = sorted(by_class[label])
        shuffled = [ids[i] for i in rng.permutation(len(ids))]
        sizes = _largest_remainder(len(ids), fractions)
        offset = 0
        for fold_idx, size in enumerate(sizes):
            folds[fold_idx].extend(shuffled[offset : offset + size])
            offset += size

    return SplitAssignment(seed=seed,
                           train=tuple(sorted(folds[0])),
                           validation=tuple(sorted(folds[1])),
                           test=tuple(sorted(folds[2])))


def write_split(split: SplitAssignment, path) -> None:
    payload = {"seed": split.seed, "train": list(split.train),
               "validation": list(split.validation), "test": list(split.test)}
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def read_split(path) -> SplitAssignment:
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from None
    missing = {"seed", *FOLD_NAMES} - payload.keys()
    if missing:
        raise FormatError(f"{path}: split file missing keys {sorted(missing)}")
    return SplitAssignment(seed=int(payload["seed"]),
                           train=tuple(payload["train"]),
                           validation=tuple(payload["validation"]),
                           test=tuple(payload["test"]))


def class_weights(patients: list[PatientRecord]) -> np.ndarray:
    """Inverse-frequency loss weights normalized to mean 1: N / (3 * N_i)."""
    counts = np.zeros(3)
    for p in patients:
        counts[p.label] += 1
    if (counts == 0).any():
        empty = [MurmurLabel(i).canonical for i in np.flatnonzero(counts == 0)]
        raise PreconditionError(f"cannot weight classes with no patients: {empty}")
    return counts.sum() / (3.0 * counts)


@dataclass
class EmbeddingSet:
    dim: int
    entries: dict[tuple[str, int], np.ndarray] = field(default_factory=dict)

    def add(self, recording_id: str, segment_index: int, vector: np.ndarray) -> None:
        vector = np.asarray(vector, dtype=np.float32)
        if vector.shape != (self.dim,):
            raise PreconditionError(
                f"embedding for ({recording_id}, {segment_index}) has shape "
                f"{vector.shape}, expected ({self.dim},)")
        if not np.isfinite(vector).all():
            raise PreconditionError(
                f"embedding for ({recording_id}, {segment_index}) has non-finite values")
        self.entries[(recording_id, segment_index)] = vector


def write_embeddings(embeddings: EmbeddingSet, path) -> None:
    """Serialize to the HSEB bridge format (entries sorted for determinism)."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIII", EMBEDDING_MAGIC, EMBEDDING_VERSION,
                             embeddings.dim, len(embeddings.entries)))
        for (rid, idx), vec in sorted(embeddings.entries.items()):
            rid_bytes = rid.encode("utf-8")
            if len(rid_bytes) > 0xFFFF:
                raise FormatError(f"recording id too long to serialize: {rid!r}")
            fh.write(struct.pack("<H", len(rid_bytes)))
            fh.write(rid_bytes)
            fh.write(struct.pack("<I", idx))
            fh.write(np.ascontiguousarray(vec, dtype="<f4").tobytes())


def read_embeddings(path) -> EmbeddingSet:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise FormatError(f"{path}: too short for an embedding file")
    magic, version, dim, count = struct.unpack_from("<4sIII", raw, 0)
    if magic != EMBEDDING_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != EMBEDDING_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")

    out = EmbeddingSet(dim=dim)
    off = 16
    for _ in range(count):
        if off + 2 > len(raw):
            raise FormatError(f"{path}: truncated entry header")
        (rid_len,) = struct.unpack_from("<H", raw, off)
        off += 2
        end = off + rid_len + 4 + dim * 4
        if end > len(raw):
            raise FormatError(f"{path}: entry payload extends past end of file")
        rid = raw[off : off + rid_len].decode("utf-8")
        off += rid_len
        (idx,) = struct.unpack_from("<I", raw, off)
        off += 4
        vec = np.frombuffer(raw, dtype="<f4", count=dim, offset=off).copy()
        off += dim * 4
        out.entries[(rid, idx)] = vec
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes after last entry")
    return out


# --- synthetic corpus -------------------------------------------------------

SYNTH_RATE = 4000
_LOCATIONS = ("AV", "PV", "TV", "MV")
MURMUR_BAND = (150.0, 400.0)

# signal level ranges. Per-recording draws keep the classes separable but not
# instantly so: the noise floor of clean recordings varies in level and
# bandwidth up to just below the level that earns an Unknown label, so telling
# Unknown from Absent needs a learned threshold rather than a one-step
# heuristic, and a small validation fold stays informative deep into training.
# Levels are drawn stratified across a patient's recordings, so every patient
# owns both an easy and a near-threshold recording. The murmur amplitude floor
# keeps the Present/Absent in-band margin wide.
_CLICK_AMP_RANGE = (0.4, 0.6)
_HEART_RATE_RANGE = (0.8, 1.6)
_FLOOR_RMS_RANGE = (0.02, 0.08)
_FLOOR_SMOOTH_RANGE = (0.05, 0.25)
_MURMUR_AMP_RANGE = (0.35, 0.6)
_MURMUR_LO_RANGE = (150.0, 280.0)
_MURMUR_MIN_WIDTH = 70.0
_UNKNOWN_CLICK_RANGE = (0.05, 0.2)
_UNKNOWN_NOISE_RANGE = (0.13, 0.30)


def _stratum(bounds: tuple[float, float], index: int, count: int) -> tuple[float, float]:
    """index-th of count equal sub-ranges of bounds."""
    lo, hi = bounds
    step = (hi - lo) / count
    return lo + step * index, lo + step * (index + 1)


def _damped_tone(freq: float, length: int, decay: float = 0.02) -> np.ndarray:
    t = np.arange(length) / SYNTH_RATE
    return np.exp(-t / decay) * np.sin(2 * np.pi * freq * t)


def _bandpass_noise(rng: np.random.Generator, n: int, lo: float, hi: float) -> np.ndarray:
    spectrum = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, d=1.0 / SYNTH_RATE)
    spectrum[(freqs < lo) | (freqs > hi)] = 0.0
    noise = np.fft.irfft(spectrum, n=n)
    rms = np.sqrt(np.mean(noise**2))
    return noise / rms if rms > 0 else noise


def _heart_base(rng: np.random.Generator, floor_rms_range: tuple[float, float]
                ) -> tuple[np.ndarray, np.ndarray]:
    """Dual-click heartbeat train plus faint pink-ish noise, and the flat-top
    systolic envelope (1 between S1 and S2, raised-cosine edges) used to place
    murmurs. Rate, click level, and duration vary per recording; the noise
    floor level comes from the caller's sub-range."""
    duration = rng.uniform(8.0, 20.0)
    n = int(round(duration * SYNTH_RATE))
    beat = 1.0 / rng.uniform(*_HEART_RATE_RANGE)  # seconds per beat
    click_amp = rng.uniform(*_CLICK_AMP_RANGE)
    x = np.zeros(n)
    systole = np.zeros(n)
    click_len = int(0.08 * SYNTH_RATE)
    s1 = _damped_tone(30.0, click_len)
    s2 = _damped_tone(45.0, click_len)
    edge = int(0.02 * SYNTH_RATE)
    ramp = np.sin(np.linspace(0.0, np.pi / 2, edge)) ** 2
    t0 = 0.0
    while t0 < duration:
        i1 = int(t0 * SYNTH_RATE)
        i2 = int((t0 + 0.35 * beat) * SYNTH_RATE)
        for idx, click in ((i1, s1), (i2, s2)):
            stop = min(idx + click_len, n)
            if idx < n:
                x[idx:stop] += click_amp * click[: stop - idx]
        gap_start, gap_stop = i1 + click_len, min(i2, n)
        if gap_stop > gap_start:
            w = gap_stop - gap_start
            env = np.ones(w)
            e = min(edge, w // 2)
            if e > 0:
                env[:e] = ramp[:e]
                env[w - e:] = ramp[:e][::-1]
            systole[gap_start:gap_stop] = env
        t0 += beat

    # crude pink-ish floor: exponentially smoothed white noise, with the
    # smoothing constant (bandwidth) and level drawn per recording
    floor_rms = rng.uniform(*floor_rms_range)
    alpha = rng.uniform(*_FLOOR_SMOOTH_RANGE)
    white = rng.standard_normal(n)
    pink = np.empty(n)
    acc = 0.0
    for i in range(n):
        acc = (1 - alpha) * acc + alpha * white[i]
        pink[i] = acc
    pink *= floor_rms / max(np.sqrt(np.mean(pink**2)), 1e-12)
    return x + pink, systole


def _write_wav(path: Path, samples: np.ndarray) -> None:
    peak = np.abs(samples).max()
    if peak > 0.97:
        samples = samples * (0.97 / peak)
    pcm = np.round(samples * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(SYNTH_RATE)
        fh.writeframes(pcm.tobytes())


def generate_synthetic(patients_per_class: int, recordings_per_patient: int,
                       seed: int, out_dir) -> Corpus:
    """Write a deterministic CirCor-style corpus of synthetic heart sounds.

    Absent and Present recordings of the same (patient index, recording index)
    share the same base heartbeat; Present adds a systolic murmur confined to
    a per-recording sub-band of 150-400 Hz, so the pair differs only by
    in-band energy. Unknown drowns the heartbeat in broadband noise. Levels,
    rates, and murmur bands vary per recording, stratified so each patient's
    recordings span easy to near-threshold.
    """
    if patients_per_class < 1 or recordings_per_patient < 1:
        raise PreconditionError("patients_per_class and recordings_per_patient must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    id_base = {MurmurLabel.PRESENT: 10000, MurmurLabel.UNKNOWN: 20000,
               MurmurLabel.ABSENT: 30000}
    patients: list[PatientRecord] = []
    wav_paths: dict[str, Path] = {}

    for label in MurmurLabel:
        for i in range(patients_per_class):
            pid = str(id_base[label] + i)
            rids = []
            for r in range(recordings_per_patient):
                base_rng = np.random.default_rng([seed, 100, i, r])
                # stratified hardness: the last recording gets the noisiest
                # floor, the first the quietest murmur / faintest Unknown noise
                floor_range = _stratum(_FLOOR_RMS_RANGE, r, recordings_per_patient)
                x, systole = _heart_base(base_rng, floor_range)
                if label is MurmurLabel.PRESENT:
                    murmur_rng = np.random.default_rng([seed, 101, i, r])
                    amp = murmur_rng.uniform(
                        *_stratum(_MURMUR_AMP_RANGE, r, recordings_per_patient))
                    lo = murmur_rng.uniform(*_MURMUR_LO_RANGE)
                    hi = murmur_rng.uniform(lo + _MURMUR_MIN_WIDTH, MURMUR_BAND[1])
                    murmur = _bandpass_noise(murmur_rng, len(x), lo, hi)
                    x = x + amp * murmur * systole
                elif label is MurmurLabel.UNKNOWN:
                    noise_rng = np.random.default_rng([seed, 102, i, r])
                    click_factor = noise_rng.uniform(*_UNKNOWN_CLICK_RANGE)
                    noise_rms = noise_rng.uniform(
                        *_stratum(_UNKNOWN_NOISE_RANGE, r, recordings_per_patient))
                    x = click_factor * x + noise_rms * noise_rng.standard_normal(len(x))

                loc = _LOCATIONS[r % len(_LOCATIONS)]
                rid = f"{pid}_{loc}" if r < len(_LOCATIONS) else f"{pid}_{loc}{r}"
                path = out_dir / f"{rid}.wav"
                _write_wav(path, x)
                rids.append(rid)
                wav_paths[rid] = path

            lines = [f"{pid} {len(rids)} {SYNTH_RATE}"]
            lines += [f"{rid.split('_', 1)[1]} {rid}.wav" for rid in rids]
            lines.append(f"#Murmur: {label.canonical}")
            (out_dir / f"{pid}.txt").write_text("\n".join(lines) + "\n")
            patients.append(PatientRecord(patient_id=pid, label=label,
                                          recording_ids=tuple(rids)))

    return Corpus(patients=patients, wav_paths=wav_paths)
