"""Heart murmur detection from auscultation recordings.

Pipeline: WAV decoding and 5-s segmentation (audio), log-mel features with
SpecAugment (features), corpus ingestion / splits / synthetic data (dataset),
a small autodiff network with AdamW and warmup-cosine scheduling (nn), the
training harness (train), and patient-level metrics (evaluation). The cli
module exposes everything as the `murmurdet` command.
"""

from .errors import (
    PipelineError,
    FormatError,
    UnsupportedError,
    MetadataError,
    DataError,
    PreconditionError,
    ShapeError,
    StateError,
    NumericsError,
)
from .dataset import (
    MurmurLabel,
    PatientRecord,
    Corpus,
    SplitAssignment,
    EmbeddingSet,
    ingest_circor,
    ingest_manifest,
    export_manifest,
    stratified_split,
    class_weights,
    generate_synthetic,
    read_embeddings,
    write_embeddings,
    read_split,
    write_split,
)
from .evaluation import (
    ClassScores,
    ConfusionCounts,
    MetricsReport,
    RecordingPrediction,
    weighted_accuracy,
    unweighted_average_recall,
    per_class_recalls,
    patient_label_rule,
    patient_prob_average,
    ensemble_two,
    score_patients,
    mean_reports,
)
from .train import (
    TrainConfig,
    LogMelSource,
    EmbeddingSource,
    default_config,
    train_one,
    run_protocol,
)

__version__ = "0.1.0"

__all__ = [
    "PipelineError", "FormatError", "UnsupportedError", "MetadataError",
    "DataError", "PreconditionError", "ShapeError", "StateError",
    "NumericsError",
    "MurmurLabel", "PatientRecord", "Corpus", "SplitAssignment",
    "EmbeddingSet", "ingest_circor", "ingest_manifest", "export_manifest",
    "stratified_split", "class_weights", "generate_synthetic",
    "read_embeddings", "write_embeddings", "read_split", "write_split",
    "ClassScores", "ConfusionCounts", "MetricsReport", "RecordingPrediction",
    "weighted_accuracy", "unweighted_average_recall", "per_class_recalls",
    "patient_label_rule", "patient_prob_average", "ensemble_two",
    "score_patients", "mean_reports",
    "TrainConfig", "LogMelSource", "EmbeddingSource", "default_config",
    "train_one", "run_protocol",
    "__version__",
]
