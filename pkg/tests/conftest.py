import numpy as np
import pytest

from murmurdet import dataset


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """3 patients/class x 2 recordings, enough for split + training smoke."""
    root = tmp_path_factory.mktemp("tiny_corpus")
    return dataset.generate_synthetic(3, 2, seed=11, out_dir=root)


@pytest.fixture(scope="session")
def tiny_split(tiny_corpus):
    return dataset.stratified_split(tiny_corpus.patients, seed=1)


@pytest.fixture(scope="session")
def tiny_logmel(tiny_corpus):
    """Shared feature cache over the tiny corpus; prefetched once per session."""
    from murmurdet import train

    source = train.LogMelSource(tiny_corpus)
    rids = [rid for p in tiny_corpus.patients for rid in p.recording_ids]
    source.prefetch(rids, threads=2)
    return source


def make_predictions(rng, recording_ids, patient_of):
    """Random but well-formed per-recording predictions."""
    from murmurdet import evaluation

    out = []
    for rid in recording_ids:
        logits = rng.normal(size=3)
        out.append(evaluation.RecordingPrediction(
            recording_id=rid, patient_id=patient_of[rid],
            logits=logits, probs=evaluation.softmax(logits)))
    return out
