"""Command-line surface tying the pipeline together.

Exit codes: 0 success, 1 data error, 2 usage error, 3 numerical failure.
Every command validates its inputs before writing anything, takes all
randomness from explicit seeds, and never mutates its input files.
"""

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import audio, dataset, evaluation, features, nn, train
from .dataset import MurmurLabel
from .errors import FormatError, DataError, NumericsError, PipelineError


class UsageError(Exception):
    """Bad arguments that argparse cannot express (exit code 2)."""


def _say(args, message: str) -> None:
    if not args.quiet:
        print(message)


def _emit_report(args, report: evaluation.MetricsReport) -> None:
    # --json is the machine-readable mode and deliberately ignores --quiet
    if args.json:
        print(json.dumps(report.to_dict(), sort_keys=True))
    else:
        _say(args, report.text_table())


def _add_corpus_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_mutually_exclusive_group(required=True)
    group.add_argument("--data-dir", help="directory of CirCor-style .txt/.wav files")
    group.add_argument("--manifest", help="CSV manifest (patient_id,label,wav_path)")


def _load_corpus(args) -> dataset.Corpus:
    if args.data_dir:
        corpus = dataset.ingest_circor(args.data_dir)
    else:
        corpus = dataset.ingest_manifest(args.manifest)
    for warning in corpus.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    return corpus


def _feature_source(spec: str, corpus: dataset.Corpus):
    if spec == "logmel":
        return train.LogMelSource(corpus)
    if spec.startswith("embeddings:"):
        path = spec.partition(":")[2]
        if not path:
            raise UsageError("--features embeddings: requires a file path")
        return train.EmbeddingSource(dataset.read_embeddings(path), corpus)
    raise UsageError(f"unknown feature source {spec!r}; use logmel or embeddings:PATH")


def _fold_recordings(corpus: dataset.Corpus, patient_ids) -> list[str]:
    by_id = corpus.by_id()
    missing = [pid for pid in patient_ids if pid not in by_id]
    if missing:
        raise DataError(f"split names patients absent from the dataset: {missing}")
    return [rid for pid in patient_ids for rid in by_id[pid].recording_ids]


def cmd_split(args) -> None:
    corpus = _load_corpus(args)
    split = dataset.stratified_split(corpus.patients, seed=args.seed)
    dataset.write_split(split, args.out)
    by_id = corpus.by_id()
    for fold in ("train", "validation", "test"):
        ids = split.fold(fold)
        counts = ", ".join(
            f"{name} {sum(1 for pid in ids if by_id[pid].label is label)}"
            for name, label in zip(evaluation.CLASS_NAMES, MurmurLabel))
        _say(args, f"{fold}: {counts}  ({len(ids)} patients)")


def _recording_windows(corpus: dataset.Corpus, rid: str):
    """Log-mel spectrograms for the union of training and test windows,
    keyed by 2.5-s window index."""
    wav = audio.resample_to_16k(audio.decode_wav(corpus.wav_paths[rid]))
    segments = {seg.start_sample: seg for seg in audio.segment_train(wav)}
    for seg in audio.segment_test(wav):
        segments.setdefault(seg.start_sample, seg)
    return [(audio.segment_key(start), features.log_mel(seg))
            for start, seg in sorted(segments.items())]


def cmd_featurize(args) -> None:
    corpus = _load_corpus(args)
    rids = sorted(corpus.wav_paths)
    compute = lambda rid: _recording_windows(corpus, rid)
    if args.threads > 1 and len(rids) > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            per_recording = list(pool.map(compute, rids))
    else:
        per_recording = [compute(rid) for rid in rids]

    embeddings = dataset.EmbeddingSet(dim=2 * features.MEL_BINS)
    for rid, windows in zip(rids, per_recording):
        for key, spec in windows:
            embeddings.add(rid, key, features.pooled_summary(spec.values))
    dataset.write_embeddings(embeddings, args.out)

    if args.dump_spectrograms:
        dump_dir = Path(args.dump_spectrograms)
        dump_dir.mkdir(parents=True, exist_ok=True)
        for rid, windows in zip(rids, per_recording):
            for key, spec in windows:
                features.dump_spectrogram_csv(spec, dump_dir / f"{rid}.{key}.csv")

    _say(args, f"wrote {len(embeddings.entries)} window embeddings "
               f"for {len(rids)} recordings to {args.out}")


def cmd_train(args) -> None:
    try:
        config = train.read_config(args.config)
    except FormatError as exc:
        # a broken config is an argument problem, not a data problem
        raise UsageError(str(exc)) from None
    corpus = _load_corpus(args)
    split = dataset.read_split(args.split)
    source = _feature_source(args.features, corpus)
    if isinstance(source, train.LogMelSource):
        rids = _fold_recordings(
            corpus, split.train + split.validation + split.test)
        source.prefetch(rids, threads=args.threads)
    result = train.train_one(config, split, corpus, source)
    train.write_run_outputs(result, args.outdir)
    _say(args, f"selected epoch {result.best_epoch} "
               f"(validation {result.best_metric:.4f}); "
               f"test W.acc {result.report.w_acc:.4f} "
               f"UAR {result.report.uar:.4f}; outputs in {args.outdir}")


def cmd_evaluate(args) -> None:
    corpus = _load_corpus(args)
    split = dataset.read_split(args.split)
    model, meta = train.network_from_checkpoint(args.checkpoint)
    source = _feature_source(args.features, corpus)
    if source.feature_dim != model.input_dim:
        raise DataError(f"checkpoint expects {model.input_dim}-dim features, "
                        f"source provides {source.feature_dim}")
    by_id = corpus.by_id()
    pids = split.fold(args.fold)
    _fold_recordings(corpus, pids)  # membership check before any compute
    if isinstance(source, train.LogMelSource):
        source.prefetch(_fold_recordings(corpus, pids), threads=args.threads)
    patients = [by_id[pid] for pid in pids]
    report, predictions = train.evaluate_fold(
        model, patients, source, use_rule=args.rule == "decision")
    evaluation.write_predictions(predictions, args.out)
    _emit_report(args, report)


def _load_prediction_runs(run_dirs) -> tuple[list[dict], dict[str, str]]:
    runs, patient_of = [], {}
    for run_dir in run_dirs:
        preds = evaluation.read_predictions(Path(run_dir) / "test_predictions.json")
        runs.append({p.recording_id: p.scores() for p in preds})
        for p in preds:
            patient_of[p.recording_id] = p.patient_id
    return runs, patient_of


def cmd_ensemble(args) -> None:
    if len(args.runs_a) != args.runs_per_side or len(args.runs_b) != args.runs_per_side:
        raise UsageError(f"expected {args.runs_per_side} run directories per side, "
                         f"got {len(args.runs_a)} and {len(args.runs_b)}")
    corpus = _load_corpus(args)
    runs_a, patient_of = _load_prediction_runs(args.runs_a)
    runs_b, patient_of_b = _load_prediction_runs(args.runs_b)
    patient_of.update(patient_of_b)
    combined = evaluation.ensemble_two(runs_a, runs_b)

    # ensembles carry probabilities; store log-probabilities as the logits so
    # the prediction file format (and softmax round trip) stays uniform
    predictions = [
        evaluation.RecordingPrediction(
            recording_id=rid, patient_id=patient_of[rid],
            logits=np.log(scores.values), probs=scores.values)
        for rid, scores in sorted(combined.items())
    ]
    by_id = corpus.by_id()
    missing = sorted({p.patient_id for p in predictions} - set(by_id))
    if missing:
        raise DataError(f"predictions reference patients absent from the dataset: {missing}")
    evaluation.write_predictions(predictions, args.out)
    predicted = evaluation.label_patients(predictions)
    truth = {pid: by_id[pid].label for pid in predicted}
    _emit_report(args, evaluation.score_patients(predicted, truth))


def cmd_report(args) -> None:
    reports = []
    for run_dir in args.runs:
        path = Path(run_dir) / "report.json"
        try:
            payload = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: not valid JSON ({exc})") from None
        reports.append(evaluation.MetricsReport.from_dict(payload))

    configs = []
    for run_dir in args.runs:
        checkpoint = Path(run_dir) / "checkpoint.hsck"
        if checkpoint.exists():
            meta, _ = nn.load_checkpoint(checkpoint)
            configs.append(meta.get("config"))
    if configs and any(c != configs[0] for c in configs[1:]):
        print("warning: aggregated runs were trained with differing configs",
              file=sys.stderr)

    _emit_report(args, evaluation.mean_reports(reports))


def cmd_synth(args) -> None:
    corpus = dataset.generate_synthetic(
        args.patients_per_class, args.recordings_per_patient, args.seed, args.out)
    _say(args, f"wrote {len(corpus.patients)} patients "
               f"({len(corpus.wav_paths)} recordings) to {args.out}")


def cmd_gradcheck(args) -> None:
    worst = nn.gradcheck_suite(trials=args.trials, master_seed=args.seed)
    _say(args, f"max relative error over {args.trials} configurations: {worst:.3e}")
    if worst >= 1e-4:
        raise NumericsError(
            f"gradient check failed: relative error {worst:.3e} >= 1e-4")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="murmurdet",
        description="Heart murmur detection pipeline: 3-class recording "
                    "classification with patient-level aggregation.")
    parser.add_argument("--quiet", action="store_true",
                        help="suppress informational output")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker threads for feature extraction")
    parser.add_argument("--json", action="store_true",
                        help="print reports as JSON instead of tables")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", help="write a stratified patient-level split")
    _add_corpus_flags(p)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="output split JSON")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("featurize",
                       help="extract pooled log-mel window features to an embedding file")
    _add_corpus_flags(p)
    p.add_argument("--out", required=True, help="output embedding file")
    p.add_argument("--dump-spectrograms", metavar="DIR",
                   help="also dump raw log-mel spectrograms as CSV")
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train", help="train one model and write its run directory")
    _add_corpus_flags(p)
    p.add_argument("--config", required=True, help="key = value training config")
    p.add_argument("--split", required=True, help="split JSON from the split command")
    p.add_argument("--features", default="logmel",
                   help="logmel (default) or embeddings:PATH")
    p.add_argument("--outdir", required=True, help="run output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a split fold")
    _add_corpus_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--fold", default="test",
                   choices=("train", "validation", "test"))
    p.add_argument("--rule", default="decision",
                   choices=("decision", "prob-average"),
                   help="patient aggregation: decision rule or probability average")
    p.add_argument("--features", default="logmel",
                   help="logmel (default) or embeddings:PATH")
    p.add_argument("--out", required=True, help="output predictions JSON")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ensemble", help="average two models' prediction sets")
    _add_corpus_flags(p)
    p.add_argument("--runs-a", nargs="+", required=True, metavar="DIR")
    p.add_argument("--runs-b", nargs="+", required=True, metavar="DIR")
    p.add_argument("--runs-per-side", type=int, default=5)
    p.add_argument("--out", required=True, help="output predictions JSON")
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("report", help="aggregate run reports into mean metrics")
    p.add_argument("--runs", nargs="+", required=True, metavar="DIR")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("synth", help="generate a deterministic synthetic corpus")
    p.add_argument("--patients-per-class", type=int, required=True)
    p.add_argument("--recordings-per-patient", type=int, default=4)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gradcheck",
                       help="verify autodiff gradients against finite differences")
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericsError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
