"""Aggregation from segment logits up to patient-level metrics.

Recording scores are the softmax of the mean segment logits. Patients are
labeled either by the priority rule (any Present recording wins, then any
Unknown, else Absent) or by averaging recording probabilities. Metrics follow
the weighted-accuracy / unweighted-average-recall pair used for this task,
always in class order Present, Unknown, Absent.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .dataset import MurmurLabel
from .errors import DataError, FormatError, PreconditionError, ShapeError

CLASS_NAMES = ("Present", "Unknown", "Absent")
WACC_WEIGHTS = (5.0, 3.0, 1.0)

LOGITS = "logits"
PROBABILITIES = "probabilities"


@dataclass(frozen=True)
class ClassScores:
    values: np.ndarray
    kind: str

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        if values.shape != (3,):
            raise ShapeError(f"class scores must have shape (3,), got {values.shape}")
        if self.kind not in (LOGITS, PROBABILITIES):
            raise PreconditionError(f"unknown score kind {self.kind!r}")
        if self.kind == PROBABILITIES:
            if (values < 0).any() or abs(values.sum() - 1.0) > 1e-6:
                raise PreconditionError(
                    f"probabilities must be non-negative and sum to 1, got {values}")

    @property
    def argmax(self) -> MurmurLabel:
        # ties resolve to the first (highest-priority) class: Present > Unknown > Absent
        return MurmurLabel(int(np.argmax(self.values)))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    e = np.exp(shifted)
    return e / e.sum()


def recording_probs(segment_logits: Sequence[ClassScores]) -> ClassScores:
    """Mean of the segment logits, then softmax."""
    if not segment_logits:
        raise PreconditionError("recording has no segment logits")
    for s in segment_logits:
        if s.kind != LOGITS:
            raise PreconditionError(f"expected logits, got {s.kind}")
    mean = np.mean([s.values for s in segment_logits], axis=0)
    return ClassScores(softmax(mean), PROBABILITIES)


def patient_label_rule(recording_scores: Sequence[ClassScores]) -> MurmurLabel:
    """Any recording judged Present makes the patient Present; otherwise any
    Unknown makes it Unknown; otherwise Absent."""
    if not recording_scores:
        raise PreconditionError("patient has no recordings")
    labels = [s.argmax for s in recording_scores]
    if MurmurLabel.PRESENT in labels:
        return MurmurLabel.PRESENT
    if MurmurLabel.UNKNOWN in labels:
        return MurmurLabel.UNKNOWN
    return MurmurLabel.ABSENT


def patient_prob_average(recording_scores: Sequence[ClassScores]) -> MurmurLabel:
    """Rule-off variant: argmax of the mean per-class probability."""
    if not recording_scores:
        raise PreconditionError("patient has no recordings")
    mean = np.mean([s.values for s in recording_scores], axis=0)
    return MurmurLabel(int(np.argmax(mean)))


@dataclass
class ConfusionCounts:
    matrix: np.ndarray  # rows = true class, columns = predicted class

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.int64)
        if m.shape != (3, 3):
            raise ShapeError(f"confusion matrix must be 3x3, got {m.shape}")
        if (m < 0).any():
            raise PreconditionError("confusion counts cannot be negative")
        self.matrix = m

    @classmethod
    def from_labels(cls, true: Sequence[MurmurLabel],
                    predicted: Sequence[MurmurLabel]) -> "ConfusionCounts":
        if len(true) != len(predicted):
            raise PreconditionError(f"{len(true)} true labels vs {len(predicted)} predictions")
        m = np.zeros((3, 3), dtype=np.int64)
        for t, p in zip(true, predicted):
            m[int(t), int(p)] += 1
        return cls(m)

    @property
    def correct(self) -> np.ndarray:
        return np.diag(self.matrix)

    @property
    def totals(self) -> np.ndarray:
        return self.matrix.sum(axis=1)


def weighted_accuracy(cc: ConfusionCounts) -> float:
    """(5*c_present + 3*c_unknown + c_absent) / (5*t_present + 3*t_unknown + t_absent)"""
    w = np.asarray(WACC_WEIGHTS)
    denom = float(w @ cc.totals)
    if denom == 0.0:
        raise PreconditionError("weighted accuracy undefined with no patients")
    return float(w @ cc.correct) / denom


def per_class_recalls(cc: ConfusionCounts) -> np.ndarray:
    totals = cc.totals
    if (totals == 0).any():
        empty = [CLASS_NAMES[i] for i in np.flatnonzero(totals == 0)]
        raise PreconditionError(f"recall undefined for classes with no patients: {empty}")
    return cc.correct / totals


def unweighted_average_recall(cc: ConfusionCounts) -> float:
    return float(per_class_recalls(cc).mean())


@dataclass
class MetricsReport:
    w_acc: float
    uar: float
    recalls: np.ndarray
    confusion: ConfusionCounts
    runs: int = 1

    def to_dict(self) -> dict:
        return {
            "w_acc": self.w_acc,
            "uar": self.uar,
            "recalls": {"present": float(self.recalls[0]),
                        "unknown": float(self.recalls[1]),
                        "absent": float(self.recalls[2])},
            "confusion": self.confusion.matrix.tolist(),
            "runs": self.runs,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "MetricsReport":
        try:
            recalls = np.array([payload["recalls"]["present"],
                                payload["recalls"]["unknown"],
                                payload["recalls"]["absent"]])
            return cls(w_acc=float(payload["w_acc"]), uar=float(payload["uar"]),
                       recalls=recalls,
                       confusion=ConfusionCounts(np.array(payload["confusion"])),
                       runs=int(payload.get("runs", 1)))
        except KeyError as exc:
            raise FormatError(f"report missing field {exc}") from None

    def text_table(self) -> str:
        header = f"{'W.acc':>7}  {'UAR':>7}  {'Present':>7}  {'Unknown':>7}  {'Absent':>7}"
        row = (f"{self.w_acc:>7.3f}  {self.uar:>7.3f}  {self.recalls[0]:>7.3f}  "
               f"{self.recalls[1]:>7.3f}  {self.recalls[2]:>7.3f}")
        return header + "\n" + row


def score_patients(predicted: Mapping[str, MurmurLabel],
                   true: Mapping[str, MurmurLabel]) -> MetricsReport:
    if set(predicted) != set(true):
        missing = sorted(set(true) - set(predicted))
        extra = sorted(set(predicted) - set(true))
        raise DataError(f"patient sets differ: missing predictions for {missing}, "
                        f"unexpected predictions for {extra}")
    ids = sorted(true)
    cc = ConfusionCounts.from_labels([true[i] for i in ids],
                                     [predicted[i] for i in ids])
    recalls = per_class_recalls(cc)
    return MetricsReport(w_acc=weighted_accuracy(cc), uar=float(recalls.mean()),
                         recalls=recalls, confusion=cc)


def mean_reports(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Mean of per-run metrics (not pooled counts); confusions are summed so
    the aggregate still carries the raw counts."""
    if not reports:
        raise PreconditionError("no reports to aggregate")
    recalls = np.mean([r.recalls for r in reports], axis=0)
    total_conf = ConfusionCounts(np.sum([r.confusion.matrix for r in reports], axis=0))
    return MetricsReport(
        w_acc=float(np.mean([r.w_acc for r in reports])),
        uar=float(np.mean([r.uar for r in reports])),
        recalls=recalls, confusion=total_conf,
        runs=sum(r.runs for r in reports))


def ensemble_two(runs_a: Sequence[Mapping[str, ClassScores]],
                 runs_b: Sequence[Mapping[str, ClassScores]]) -> dict[str, ClassScores]:
    """Average of all pairwise-averaged predictions between two models' runs.

    The loop is deliberately literal (every (a, b) pair contributes its own
    average) rather than relying on the mean-of-means identity; the identity
    is checked in tests instead of assumed here.
    """
    if not runs_a or not runs_b:
        raise PreconditionError("both models need at least one run")
    reference = sorted(runs_a[0])
    for run in list(runs_a) + list(runs_b):
        if sorted(run) != reference:
            diff = sorted(set(run) ^ set(reference))
            raise DataError(f"runs cover different recordings; symmetric difference: {diff}")

    out: dict[str, ClassScores] = {}
    pairs = len(runs_a) * len(runs_b)
    for rid in reference:
        acc = np.zeros(3)
        for run_a in runs_a:
            for run_b in runs_b:
                acc += 0.5 * (run_a[rid].values + run_b[rid].values)
        out[rid] = ClassScores(acc / pairs, PROBABILITIES)
    return out


@dataclass(frozen=True)
class RecordingPrediction:
    recording_id: str
    patient_id: str
    logits: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "logits", np.asarray(self.logits, dtype=np.float64))
        object.__setattr__(self, "probs", np.asarray(self.probs, dtype=np.float64))
        if self.logits.shape != (3,) or self.probs.shape != (3,):
            raise ShapeError(f"prediction for {self.recording_id} must carry 3 logits "
                             f"and 3 probabilities")

    def scores(self) -> ClassScores:
        return ClassScores(self.probs, PROBABILITIES)


def write_predictions(predictions: Sequence[RecordingPrediction], path) -> None:
    payload = [
        {"recording_id": p.recording_id, "patient_id": p.patient_id,
         "logits": p.logits.tolist(), "probs": p.probs.tolist()}
        for p in sorted(predictions, key=lambda p: p.recording_id)
    ]
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def read_predictions(path) -> list[RecordingPrediction]:
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(payload, list):
        raise FormatError(f"{path}: prediction file must be a JSON array")
    out = []
    for entry in payload:
        try:
            out.append(RecordingPrediction(
                recording_id=entry["recording_id"], patient_id=entry["patient_id"],
                logits=np.array(entry["logits"]), probs=np.array(entry["probs"])))
        except (KeyError, TypeError) as exc:
            raise FormatError(f"{path}: malformed prediction entry ({exc})") from None
    return out


def predictions_by_patient(predictions: Sequence[RecordingPrediction]
                           ) -> dict[str, list[ClassScores]]:
    grouped: dict[str, list[ClassScores]] = {}
    for p in sorted(predictions, key=lambda p: p.recording_id):
        grouped.setdefault(p.patient_id, []).append(p.scores())
    return grouped


def label_patients(predictions: Sequence[RecordingPrediction],
                   use_rule: bool = True) -> dict[str, MurmurLabel]:
    decide = patient_label_rule if use_rule else patient_prob_average
    return {pid: decide(scores)
            for pid, scores in predictions_by_patient(predictions).items()}
