"""Training orchestration: feature sources, the 50-epoch loop with
validation-based checkpoint selection, and the 3-splits x 5-runs protocol.

Every random draw flows from the run seed through tagged substreams
(np.random.default_rng([seed, tag, ...])), so repeating a run reproduces the
initialization, the per-epoch shuffles, and the augmentation masks exactly.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import audio, features, nn
from .dataset import (Corpus, MurmurLabel, PatientRecord, SplitAssignment,
                      class_weights, stratified_split)
from .errors import DataError, FormatError, PreconditionError
from .evaluation import (ConfusionCounts, MetricsReport, RecordingPrediction,
                         label_patients, score_patients, softmax,
                         unweighted_average_recall, weighted_accuracy,
                         write_predictions)

# substream tags for the per-run RNG
SEED_TAG_INIT = 0
SEED_TAG_SHUFFLE = 1
SEED_TAG_AUGMENT = 2

BACKBONE_MLP = "mlp"
BACKBONE_EMBEDDING = "embedding-probe"

MLP_HIDDEN = (64,)  # pooled log-mel (128) -> 64 -> head

TRAIN_DTYPE = np.float32


@dataclass(frozen=True)
class TrainConfig:
    backbone: str
    base_lr: float
    batch_size: int
    seed: int
    epochs: int = 50
    warmup_epochs: int = 5
    specaugment: features.SpecAugmentConfig = features.SpecAugmentConfig(0, 0)
    loss_weighting: str = "proportional"
    selection_metric: str = "wacc"

    def __post_init__(self):
        if self.backbone not in (BACKBONE_MLP, BACKBONE_EMBEDDING):
            raise PreconditionError(f"unknown backbone {self.backbone!r}")
        if self.loss_weighting not in ("proportional", "none"):
            raise PreconditionError(f"unknown loss_weighting {self.loss_weighting!r}")
        if self.selection_metric not in ("wacc", "uar"):
            raise PreconditionError(f"unknown selection_metric {self.selection_metric!r}")
        if self.epochs <= self.warmup_epochs:
            raise PreconditionError(
                f"epochs ({self.epochs}) must exceed warmup_epochs ({self.warmup_epochs})")
        if self.batch_size < 2:
            raise PreconditionError("batch_size must be >= 2 (batch norm)")
        if self.base_lr <= 0:
            raise PreconditionError("base_lr must be positive")


def default_config(backbone: str, seed: int) -> TrainConfig:
    """Searched settings: embedding probes use lr 2.5e-4, batch 32, no
    augmentation; the built-in mlp uses lr 1e-3, batch 256, masks 20/50."""
    if backbone == BACKBONE_EMBEDDING:
        return TrainConfig(backbone=backbone, base_lr=2.5e-4, batch_size=32,
                           seed=seed)
    if backbone == BACKBONE_MLP:
        return TrainConfig(backbone=backbone, base_lr=1e-3, batch_size=256,
                           seed=seed,
                           specaugment=features.SpecAugmentConfig(20, 50))
    raise PreconditionError(f"unknown backbone {backbone!r}")


_CONFIG_KEYS = ("backbone", "base_lr", "batch_size", "seed", "epochs",
                "warmup_epochs", "specaugment", "loss_weighting",
                "selection_metric")


def format_config(config: TrainConfig) -> str:
    sa = config.specaugment
    lines = [
        f"backbone = {config.backbone}",
        f"base_lr = {config.base_lr}",
        f"batch_size = {config.batch_size}",
        f"seed = {config.seed}",
        f"epochs = {config.epochs}",
        f"warmup_epochs = {config.warmup_epochs}",
        f"specaugment = {sa.freq_param}/{sa.time_param}",
        f"loss_weighting = {config.loss_weighting}",
        f"selection_metric = {config.selection_metric}",
    ]
    return "\n".join(lines) + "\n"


def parse_config(text: str) -> TrainConfig:
    """Parse the flat `key = value` config format. The specaugment value is
    `F/T` (frequency and time mask widths). Unknown keys are rejected."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _CONFIG_KEYS:
            raise FormatError(f"config line {lineno}: unknown key {key!r}")
        if key in values:
            raise FormatError(f"config line {lineno}: duplicate key {key!r}")
        values[key] = value

    missing = [k for k in ("backbone", "base_lr", "batch_size", "seed")
               if k not in values]
    if missing:
        raise FormatError(f"config missing required keys: {missing}")
    try:
        kwargs: dict = {
            "backbone": values["backbone"],
            "base_lr": float(values["base_lr"]),
            "batch_size": int(values["batch_size"]),
            "seed": int(values["seed"]),
        }
        if "epochs" in values:
            kwargs["epochs"] = int(values["epochs"])
        if "warmup_epochs" in values:
            kwargs["warmup_epochs"] = int(values["warmup_epochs"])
        if "specaugment" in values:
            freq, _, time_ = values["specaugment"].partition("/")
            kwargs["specaugment"] = features.SpecAugmentConfig(int(freq), int(time_))
        if "loss_weighting" in values:
            kwargs["loss_weighting"] = values["loss_weighting"]
        if "selection_metric" in values:
            kwargs["selection_metric"] = values["selection_metric"]
    except ValueError as exc:
        raise FormatError(f"config value error: {exc}") from None
    return TrainConfig(**kwargs)


def read_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text())


# -- feature sources ----------------------------------------------------------


class LogMelSource:
    """Decodes, resamples, and caches per-segment log-mel spectrograms.

    Training examples keep the full spectrogram so augmentation can mask it
    fresh each epoch before pooling; evaluation features (non-overlapping
    windows, no augmentation) are pooled once and cached.
    """

    augmentable = True

    def __init__(self, corpus: Corpus):
        self.corpus = corpus
        self.feature_dim = 2 * features.MEL_BINS
        self._train_specs: dict[str, list[np.ndarray]] = {}
        self._eval_feats: dict[str, np.ndarray] = {}

    def _compute(self, rid: str) -> tuple[list[np.ndarray], np.ndarray]:
        wav = audio.decode_wav(self.corpus.wav_paths[rid])
        wav = audio.resample_to_16k(wav)
        train = [features.log_mel(seg).values.astype(np.float32)
                 for seg in audio.segment_train(wav)]
        eval_rows = [features.pooled_summary(features.log_mel(seg).values)
                     .astype(np.float32)
                     for seg in audio.segment_test(wav)]
        return train, np.stack(eval_rows)

    def _ensure(self, rid: str) -> None:
        if rid not in self._train_specs:
            self._train_specs[rid], self._eval_feats[rid] = self._compute(rid)

    def prefetch(self, recording_ids, threads: int = 1) -> None:
        missing = [rid for rid in recording_ids if rid not in self._train_specs]
        if threads > 1 and len(missing) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                for rid, result in zip(missing, pool.map(self._compute, missing)):
                    self._train_specs[rid], self._eval_feats[rid] = result
        else:
            for rid in missing:
                self._ensure(rid)

    def training_examples(self, patients: list[PatientRecord]
                          ) -> tuple[list, np.ndarray]:
        payloads, labels = [], []
        for p in patients:
            for rid in p.recording_ids:
                self._ensure(rid)
                for spec in self._train_specs[rid]:
                    payloads.append(spec)
                    labels.append(int(p.label))
        return payloads, np.array(labels, dtype=np.int64)

    def example_features(self, payload: np.ndarray, rng, sa) -> np.ndarray:
        values = payload
        if sa is not None and not sa.disabled:
            spec = features.LogMelSpec(values=values,
                                       frame_hop=features.HOP_LENGTH / audio.MODEL_RATE,
                                       mel_bins=values.shape[1])
            values = features.spec_augment(spec, sa, rng).values
        return features.pooled_summary(values).astype(np.float32)

    def recording_eval_features(self, rid: str) -> np.ndarray:
        self._ensure(rid)
        return self._eval_feats[rid]


class EmbeddingSource:
    """Serves precomputed per-window embeddings keyed by (recording id,
    window start in 2.5-s units). Training windows use consecutive keys,
    evaluation windows the even ones; both must be present in the file."""

    augmentable = False

    def __init__(self, embeddings, corpus: Corpus,
                 sample_counts: dict[str, int] | None = None):
        self.embeddings = embeddings
        self.corpus = corpus
        self.feature_dim = embeddings.dim
        self._sample_counts = dict(sample_counts) if sample_counts else {}

    def _length_16k(self, rid: str) -> int:
        if rid not in self._sample_counts:
            rate, count = audio.wav_info(self.corpus.wav_paths[rid])
            if rate == audio.MODEL_RATE:
                self._sample_counts[rid] = count
            else:
                self._sample_counts[rid] = int(round(count * audio.MODEL_RATE / rate))
        return self._sample_counts[rid]

    def _vector(self, rid: str, start: int) -> np.ndarray:
        key = (rid, audio.segment_key(start))
        if key not in self.embeddings.entries:
            raise DataError(f"no embedding for recording {rid!r}, "
                            f"segment index {key[1]}")
        return self.embeddings.entries[key]

    def training_examples(self, patients: list[PatientRecord]
                          ) -> tuple[list, np.ndarray]:
        payloads, labels = [], []
        for p in patients:
            for rid in p.recording_ids:
                for start in audio.train_window_starts(self._length_16k(rid)):
                    payloads.append(self._vector(rid, start))
                    labels.append(int(p.label))
        return payloads, np.array(labels, dtype=np.int64)

    def example_features(self, payload: np.ndarray, rng, sa) -> np.ndarray:
        return payload

    def recording_eval_features(self, rid: str) -> np.ndarray:
        rows = [self._vector(rid, start)
                for start in audio.test_window_starts(self._length_16k(rid))]
        return np.stack(rows)


def build_training_set(patients: list[PatientRecord], source
                       ) -> tuple[list, np.ndarray]:
    """One example per training segment, labeled by the segment's patient."""
    if not patients:
        raise PreconditionError("training fold is empty")
    payloads, labels = source.training_examples(patients)
    if not payloads:
        raise PreconditionError("training fold produced no segments")
    return payloads, labels


# -- the training loop --------------------------------------------------------


@dataclass
class RunResult:
    config: TrainConfig
    split: SplitAssignment
    run_seed: int
    best_epoch: int
    best_metric: float
    val_curve: list[float]
    report: MetricsReport
    predictions: list[RecordingPrediction]
    state: dict[str, np.ndarray]
    input_dim: int
    hidden: tuple[int, ...] | None


def _predict_fold(model: nn.Network, patients: list[PatientRecord], source
                  ) -> list[RecordingPrediction]:
    predictions = []
    for p in patients:
        for rid in p.recording_ids:
            feats = source.recording_eval_features(rid)
            logits = model.predict_logits(feats)
            mean_logits = logits.mean(axis=0).astype(np.float64)
            predictions.append(RecordingPrediction(
                recording_id=rid, patient_id=p.patient_id,
                logits=mean_logits, probs=softmax(mean_logits)))
    return predictions


def evaluate_fold(model: nn.Network, patients: list[PatientRecord], source,
                  use_rule: bool = True
                  ) -> tuple[MetricsReport, list[RecordingPrediction]]:
    """Patient-level scoring with the test-time procedure: non-overlapping
    windows, mean logits per recording, then the patient decision."""
    if not patients:
        raise PreconditionError("evaluation fold is empty")
    predictions = _predict_fold(model, patients, source)
    predicted = label_patients(predictions, use_rule=use_rule)
    true = {p.patient_id: p.label for p in patients}
    return score_patients(predicted, true), predictions


def _validation_metric(model: nn.Network, patients: list[PatientRecord],
                       source, metric: str) -> float:
    """Selection metric on the validation fold. Computed straight from the
    confusion counts: W.acc stays defined even if the fold happens to miss a
    class entirely (UAR does not, and raises in that case)."""
    predictions = _predict_fold(model, patients, source)
    predicted = label_patients(predictions, use_rule=True)
    true = {p.patient_id: p.label for p in patients}
    ids = sorted(true)
    cc = ConfusionCounts.from_labels([true[i] for i in ids],
                                     [predicted[i] for i in ids])
    if metric == "wacc":
        return weighted_accuracy(cc)
    return unweighted_average_recall(cc)


def train_one(config: TrainConfig, split: SplitAssignment, corpus: Corpus,
              source) -> RunResult:
    """Train one model on the split's training fold, selecting the checkpoint
    with the best validation metric (ties keep the earlier epoch), then score
    the test fold with the restored best parameters."""
    by_id = corpus.by_id()
    for fold in ("train", "validation", "test"):
        if not split.fold(fold):
            raise PreconditionError(f"{fold} fold is empty")
        missing = [pid for pid in split.fold(fold) if pid not in by_id]
        if missing:
            raise DataError(f"{fold} fold names unknown patients: {missing}")

    train_patients = [by_id[pid] for pid in split.train]
    val_patients = [by_id[pid] for pid in split.validation]
    test_patients = [by_id[pid] for pid in split.test]

    if config.loss_weighting == "proportional":
        weights = class_weights(train_patients)
    else:
        weights = np.ones(3)

    payloads, labels = build_training_set(train_patients, source)
    n = len(payloads)
    batch_size = min(config.batch_size, n)
    if batch_size < 2:
        raise PreconditionError(f"training set has {n} segments; need at least 2")
    # fixed batch layout: trailing partial batch kept unless it breaks batch norm
    starts = list(range(0, n, batch_size))
    if n - starts[-1] < 2:
        starts.pop()
    steps_per_epoch = len(starts)

    schedule = nn.ScheduleConfig(base_lr=config.base_lr,
                                 steps_per_epoch=steps_per_epoch,
                                 warmup_epochs=config.warmup_epochs,
                                 total_epochs=config.epochs)

    hidden = MLP_HIDDEN if config.backbone == BACKBONE_MLP else None
    init_rng = np.random.default_rng([config.seed, SEED_TAG_INIT])
    model = nn.Network(source.feature_dim, hidden, init_rng, dtype=TRAIN_DTYPE)
    optimizer = nn.AdamW(model.parameters())

    sa = config.specaugment if source.augmentable else None
    best_metric = -np.inf
    best_epoch = -1
    best_state: dict[str, np.ndarray] = {}
    val_curve: list[float] = []
    global_step = 0

    for epoch in range(config.epochs):
        order = np.random.default_rng(
            [config.seed, SEED_TAG_SHUFFLE, epoch]).permutation(n)
        aug_rng = np.random.default_rng([config.seed, SEED_TAG_AUGMENT, epoch])
        model.train()
        for batch_idx, start in enumerate(starts):
            idx = order[start : start + batch_size]
            rows = [source.example_features(payloads[i], aug_rng, sa) for i in idx]
            x = np.stack(rows)
            y = labels[idx]
            try:
                logits = model.forward(x)
                loss = nn.weighted_cross_entropy(logits, y, weights)
                model.zero_grad()
                loss.backward()
                optimizer.step(nn.lr_at(schedule, global_step))
            except nn.NumericsError as exc:
                raise nn.NumericsError(
                    f"epoch {epoch}, batch {batch_idx}: {exc}") from None
            global_step += 1

        metric = _validation_metric(model, val_patients, source,
                                    config.selection_metric)
        val_curve.append(metric)
        if metric > best_metric:
            best_metric = metric
            best_epoch = epoch
            best_state = model.state_dict()

    model.load_state_dict(best_state)
    report, predictions = evaluate_fold(model, test_patients, source)
    return RunResult(config=config, split=split, run_seed=config.seed,
                     best_epoch=best_epoch, best_metric=float(best_metric),
                     val_curve=val_curve, report=report, predictions=predictions,
                     state=best_state, input_dim=source.feature_dim, hidden=hidden)


def split_seed(base_seed: int, split_index: int) -> int:
    return base_seed + split_index


def run_seed(base_seed: int, split_index: int, run_index: int) -> int:
    return base_seed + 1000 * (split_index + 1) + run_index


def run_protocol(config: TrainConfig, corpus: Corpus, source,
                 n_splits: int = 3, runs_per_split: int = 5
                 ) -> tuple[list[RunResult], MetricsReport]:
    """The full protocol: n_splits stratified splits from consecutive seeds,
    runs_per_split independently seeded runs each, metrics averaged per run."""
    from .evaluation import mean_reports

    results: list[RunResult] = []
    for i in range(n_splits):
        split = stratified_split(corpus.patients, seed=split_seed(config.seed, i))
        for j in range(runs_per_split):
            run_config = replace(config, seed=run_seed(config.seed, i, j))
            results.append(train_one(run_config, split, corpus, source))
    return results, mean_reports([r.report for r in results])


# -- run artifacts ------------------------------------------------------------


def checkpoint_meta(result: RunResult) -> dict:
    sa = result.config.specaugment
    return {
        "config": {
            "backbone": result.config.backbone,
            "base_lr": result.config.base_lr,
            "batch_size": result.config.batch_size,
            "seed": result.config.seed,
            "epochs": result.config.epochs,
            "warmup_epochs": result.config.warmup_epochs,
            "specaugment": [sa.freq_param, sa.time_param],
            "loss_weighting": result.config.loss_weighting,
            "selection_metric": result.config.selection_metric,
        },
        "epoch": result.best_epoch,
        "val_metric": result.best_metric,
        "input_dim": result.input_dim,
        "hidden": list(result.hidden) if result.hidden else None,
    }


def write_run_outputs(result: RunResult, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    nn.save_checkpoint(out_dir / "checkpoint.hsck", result.state,
                       checkpoint_meta(result))
    with open(out_dir / "val_curve.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "metric"])
        for epoch, metric in enumerate(result.val_curve):
            writer.writerow([epoch, f"{metric:.10f}"])
    write_predictions(result.predictions, out_dir / "test_predictions.json")
    (out_dir / "report.json").write_text(
        json.dumps(result.report.to_dict(), sort_keys=True, indent=2) + "\n")


def network_from_checkpoint(path) -> tuple[nn.Network, dict]:
    meta, tensors = nn.load_checkpoint(path)
    try:
        input_dim = int(meta["input_dim"])
        hidden = tuple(meta["hidden"]) if meta.get("hidden") else None
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: checkpoint metadata incomplete ({exc})") from None
    model = nn.Network(input_dim, hidden, np.random.default_rng(0),
                       dtype=TRAIN_DTYPE)
    model.load_state_dict(tensors)
    model.eval()
    return model, meta
