"""Metadata ingestion, splits, class weights, embedding files, synthetic data."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from murmurdet import audio, dataset
from murmurdet.dataset import Corpus, MurmurLabel, PatientRecord
from murmurdet.errors import FormatError, MetadataError, PreconditionError


def _stub_wav(path):
    # ingest only sniffs the first 12 bytes for RIFF/WAVE
    path.write_bytes(b"RIFF" + (36).to_bytes(4, "little") + b"WAVE" + b"\x00" * 8)


def _patient_txt(root, pid, wav_names, murmur_line="#Murmur: Absent", extra=()):
    lines = [f"{pid} {len(wav_names)} 4000"]
    lines += [f"LOC {name}" for name in wav_names]
    lines.extend(extra)
    if murmur_line is not None:
        lines.append(murmur_line)
    (root / f"{pid}.txt").write_text("\n".join(lines) + "\n")


def _patients(n_present, n_unknown, n_absent):
    out = []
    for prefix, count, label in (("P", n_present, MurmurLabel.PRESENT),
                                 ("U", n_unknown, MurmurLabel.UNKNOWN),
                                 ("A", n_absent, MurmurLabel.ABSENT)):
        for i in range(count):
            pid = f"{prefix}{i:04d}"
            out.append(PatientRecord(patient_id=pid, label=label,
                                     recording_ids=(f"{pid}_AV",)))
    return out


class TestMurmurLabel:
    def test_class_order_is_fixed(self):
        # metric weights and confusion layouts index by this order
        assert MurmurLabel.PRESENT == 0
        assert MurmurLabel.UNKNOWN == 1
        assert MurmurLabel.ABSENT == 2

    @pytest.mark.parametrize("text,expected", [
        ("Present", MurmurLabel.PRESENT),
        ("Unknown", MurmurLabel.UNKNOWN),
        ("Absent", MurmurLabel.ABSENT),
        ("  absent ", MurmurLabel.ABSENT),
        ("UNKNOWN", MurmurLabel.UNKNOWN),
    ])
    def test_parse(self, text, expected):
        assert MurmurLabel.parse(text) is expected

    def test_parse_rejects_unknown_text(self):
        with pytest.raises(ValueError, match="maybe"):
            MurmurLabel.parse("maybe")

    def test_canonical_names(self):
        assert [l.canonical for l in MurmurLabel] == ["Present", "Unknown", "Absent"]


class TestPatientRecord:
    def test_requires_recordings(self):
        with pytest.raises(PreconditionError):
            PatientRecord(patient_id="p1", label=MurmurLabel.ABSENT, recording_ids=())

    def test_rejects_repeated_recording(self):
        with pytest.raises(PreconditionError):
            PatientRecord(patient_id="p1", label=MurmurLabel.ABSENT,
                          recording_ids=("a", "a"))


class TestIngestCircor:
    def test_happy_path(self, tmp_path):
        _patient_txt(tmp_path, "100", ["100_AV.wav", "100_MV.wav"],
                     murmur_line="#Murmur: Present",
                     extra=["#Age: Child", "#Outcome: Abnormal"])
        _patient_txt(tmp_path, "200", ["200_TV.wav"], murmur_line="#murmur: unknown")
        for name in ("100_AV.wav", "100_MV.wav", "200_TV.wav"):
            _stub_wav(tmp_path / name)

        corpus = dataset.ingest_circor(tmp_path)

        assert [p.patient_id for p in corpus.patients] == ["100", "200"]
        assert corpus.by_id()["100"].recording_ids == ("100_AV", "100_MV")
        assert corpus.label_of("100") is MurmurLabel.PRESENT
        assert corpus.label_of("200") is MurmurLabel.UNKNOWN
        assert corpus.wav_paths["200_TV"] == tmp_path / "200_TV.wav"
        assert corpus.warnings == []

    def test_missing_murmur_line(self, tmp_path):
        _patient_txt(tmp_path, "100", ["100_AV.wav"], murmur_line=None)
        _stub_wav(tmp_path / "100_AV.wav")
        with pytest.raises(MetadataError, match="Murmur"):
            dataset.ingest_circor(tmp_path)

    def test_unknown_murmur_value(self, tmp_path):
        _patient_txt(tmp_path, "100", ["100_AV.wav"], murmur_line="#Murmur: Loud")
        _stub_wav(tmp_path / "100_AV.wav")
        with pytest.raises(MetadataError, match="Loud"):
            dataset.ingest_circor(tmp_path)

    def test_empty_metadata_file(self, tmp_path):
        (tmp_path / "100.txt").write_text("")
        with pytest.raises(MetadataError, match="empty"):
            dataset.ingest_circor(tmp_path)

    @pytest.mark.parametrize("header", ["100", "100 three 4000"])
    def test_malformed_header(self, tmp_path, header):
        (tmp_path / "100.txt").write_text(header + "\n#Murmur: Absent\n")
        with pytest.raises(MetadataError, match="header"):
            dataset.ingest_circor(tmp_path)

    def test_unreadable_recording_warns_and_drops(self, tmp_path):
        _patient_txt(tmp_path, "100", ["100_AV.wav", "100_MV.wav"])
        _stub_wav(tmp_path / "100_AV.wav")
        (tmp_path / "100_MV.wav").write_bytes(b"not a wav")

        corpus = dataset.ingest_circor(tmp_path)

        assert corpus.by_id()["100"].recording_ids == ("100_AV",)
        assert any("100_MV" in w for w in corpus.warnings)

    def test_patient_with_no_readable_recordings_is_skipped(self, tmp_path):
        _patient_txt(tmp_path, "100", ["100_AV.wav"])
        _patient_txt(tmp_path, "200", ["200_AV.wav"])
        _stub_wav(tmp_path / "200_AV.wav")  # 100_AV.wav never written

        corpus = dataset.ingest_circor(tmp_path)

        assert [p.patient_id for p in corpus.patients] == ["200"]
        assert any("skipping patient 100" in w for w in corpus.warnings)

    def test_recording_shared_across_patients(self, tmp_path):
        _patient_txt(tmp_path, "100", ["shared_AV.wav"])
        _patient_txt(tmp_path, "200", ["shared_AV.wav"])
        _stub_wav(tmp_path / "shared_AV.wav")
        with pytest.raises(FormatError, match="shared_AV"):
            dataset.ingest_circor(tmp_path)


class TestManifest:
    def test_export_ingest_round_trip(self, tiny_corpus, tmp_path):
        manifest = tmp_path / "corpus.csv"
        dataset.export_manifest(tiny_corpus, manifest)
        loaded = dataset.ingest_manifest(manifest)
        assert loaded.patients == tiny_corpus.patients
        assert loaded.wav_paths == tiny_corpus.wav_paths

    def test_relative_paths_resolve_against_manifest_dir(self, tmp_path):
        manifest = tmp_path / "corpus.csv"
        manifest.write_text("patient_id,label,wav_path\n"
                            "100,Absent,audio/100_AV.wav\n")
        corpus = dataset.ingest_manifest(manifest)
        assert corpus.wav_paths["100_AV"] == tmp_path / "audio" / "100_AV.wav"

    def test_absolute_paths_kept(self, tmp_path):
        manifest = tmp_path / "corpus.csv"
        manifest.write_text("patient_id,label,wav_path\n"
                            f"100,Absent,{tmp_path / 'elsewhere' / 'x.wav'}\n")
        corpus = dataset.ingest_manifest(manifest)
        assert corpus.wav_paths["x"] == tmp_path / "elsewhere" / "x.wav"

    def test_rows_group_by_patient(self, tmp_path):
        manifest = tmp_path / "corpus.csv"
        manifest.write_text("patient_id,label,wav_path\n"
                            "100,Present,a.wav\n"
                            "100,Present,b.wav\n")
        corpus = dataset.ingest_manifest(manifest)
        assert corpus.by_id()["100"].recording_ids == ("a", "b")

    def test_conflicting_labels(self, tmp_path):
        manifest = tmp_path / "corpus.csv"
        manifest.write_text("patient_id,label,wav_path\n"
                            "100,Present,a.wav\n"
                            "100,Absent,b.wav\n")
        with pytest.raises(FormatError, match="conflicting"):
            dataset.ingest_manifest(manifest)

    def test_duplicate_row(self, tmp_path):
        manifest = tmp_path / "corpus.csv"
        manifest.write_text("patient_id,label,wav_path\n"
                            "100,Present,a.wav\n"
                            "100,Present,a.wav\n")
        with pytest.raises(FormatError, match="duplicate"):
            dataset.ingest_manifest(manifest)

    def test_bad_header(self, tmp_path):
        manifest = tmp_path / "corpus.csv"
        manifest.write_text("id,murmur,file\n100,Present,a.wav\n")
        with pytest.raises(FormatError, match="header"):
            dataset.ingest_manifest(manifest)

    def test_empty_file(self, tmp_path):
        manifest = tmp_path / "corpus.csv"
        manifest.write_text("")
        with pytest.raises(FormatError, match="empty"):
            dataset.ingest_manifest(manifest)

    def test_bad_label(self, tmp_path):
        manifest = tmp_path / "corpus.csv"
        manifest.write_text("patient_id,label,wav_path\n100,Loud,a.wav\n")
        with pytest.raises(FormatError, match="Loud"):
            dataset.ingest_manifest(manifest)

    def test_wrong_column_count(self, tmp_path):
        manifest = tmp_path / "corpus.csv"
        manifest.write_text("patient_id,label,wav_path\n100,Present\n")
        with pytest.raises(FormatError, match="3 columns"):
            dataset.ingest_manifest(manifest)


def _fold_class_counts(split, fold):
    counts = {"P": 0, "U": 0, "A": 0}
    for pid in split.fold(fold):
        counts[pid[0]] += 1
    return [counts["P"], counts["U"], counts["A"]]


class TestStratifiedSplit:
    def test_circor_sized_counts(self):
        # 179/68/695 patients at 65/10/25 with largest-remainder rounding
        split = dataset.stratified_split(_patients(179, 68, 695), seed=0)
        assert _fold_class_counts(split, "train") == [116, 44, 452]
        assert _fold_class_counts(split, "validation") == [18, 7, 69]
        assert _fold_class_counts(split, "test") == [45, 17, 174]

    def test_balanced_sixty(self):
        split = dataset.stratified_split(_patients(20, 20, 20), seed=1)
        assert _fold_class_counts(split, "train") == [13, 13, 13]
        assert _fold_class_counts(split, "validation") == [2, 2, 2]
        assert _fold_class_counts(split, "test") == [5, 5, 5]

    def test_deterministic_and_order_independent(self):
        patients = _patients(10, 5, 12)
        split_a = dataset.stratified_split(patients, seed=7)
        split_b = dataset.stratified_split(list(reversed(patients)), seed=7)
        assert split_a == split_b

    def test_seed_changes_assignment(self):
        patients = _patients(20, 20, 20)
        assert dataset.stratified_split(patients, seed=0) \
            != dataset.stratified_split(patients, seed=1)

    def test_custom_fractions(self):
        split = dataset.stratified_split(_patients(8, 8, 8), seed=0,
                                         fractions=(0.5, 0.25, 0.25))
        assert _fold_class_counts(split, "train") == [4, 4, 4]
        assert _fold_class_counts(split, "validation") == [2, 2, 2]

    def test_too_few_patients(self):
        with pytest.raises(PreconditionError, match="Unknown"):
            dataset.stratified_split(_patients(5, 2, 5), seed=0)

    @pytest.mark.parametrize("fractions", [
        (0.6, 0.2, 0.3),          # sums to 1.1
        (0.7, 0.3),               # wrong arity
        (0.9, 0.2, -0.1),         # negative
    ])
    def test_bad_fractions(self, fractions):
        with pytest.raises(PreconditionError, match="fractions"):
            dataset.stratified_split(_patients(5, 5, 5), seed=0, fractions=fractions)

    def test_fold_accessor(self):
        split = dataset.stratified_split(_patients(5, 5, 5), seed=0)
        assert split.fold("train") == split.train
        with pytest.raises(PreconditionError, match="dev"):
            split.fold("dev")

    @settings(max_examples=60, deadline=None)
    @given(n_p=st.integers(3, 25), n_u=st.integers(3, 25), n_a=st.integers(3, 25),
           seed=st.integers(0, 2**16))
    def test_partition_and_sizes(self, n_p, n_u, n_a, seed):
        patients = _patients(n_p, n_u, n_a)
        split = dataset.stratified_split(patients, seed=seed)
        folds = [set(split.train), set(split.validation), set(split.test)]

        assert folds[0] | folds[1] | folds[2] == {p.patient_id for p in patients}
        assert sum(len(f) for f in folds) == len(patients)  # pairwise disjoint

        # per-class sizes must match largest-remainder rounding
        for prefix, n in (("P", n_p), ("U", n_u), ("A", n_a)):
            exact = [f * n for f in dataset.SPLIT_FRACTIONS]
            base = [math.floor(e) for e in exact]
            order = sorted(range(3), key=lambda i: (-(exact[i] - base[i]), i))
            for i in order[: n - sum(base)]:
                base[i] += 1
            got = [sum(1 for pid in fold if pid.startswith(prefix)) for fold in folds]
            assert got == base


class TestClassWeights:
    def test_circor_sized_weights(self):
        w = dataset.class_weights(_patients(179, 68, 695))
        assert np.allclose(w, [942 / 537, 942 / 204, 942 / 2085], rtol=0, atol=1e-12)

    def test_count_weighted_mean_is_one(self):
        patients = _patients(7, 3, 19)
        w = dataset.class_weights(patients)
        assert np.isclose(np.dot(w, [7, 3, 19]) / 29, 1.0)

    def test_balanced_gives_ones(self):
        assert np.array_equal(dataset.class_weights(_patients(4, 4, 4)), np.ones(3))

    def test_empty_class_rejected(self):
        with pytest.raises(PreconditionError, match="Unknown"):
            dataset.class_weights(_patients(4, 0, 4))


class TestSplitIO:
    def test_round_trip(self, tmp_path):
        split = dataset.stratified_split(_patients(5, 5, 5), seed=3)
        path = tmp_path / "split.json"
        dataset.write_split(split, path)
        assert dataset.read_split(path) == split

    def test_write_is_deterministic(self, tmp_path):
        split = dataset.stratified_split(_patients(5, 5, 5), seed=3)
        dataset.write_split(split, tmp_path / "a.json")
        dataset.write_split(split, tmp_path / "b.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "split.json"
        path.write_text("{nope")
        with pytest.raises(FormatError, match="JSON"):
            dataset.read_split(path)

    def test_missing_keys(self, tmp_path):
        path = tmp_path / "split.json"
        path.write_text('{"seed": 1, "train": [], "test": []}')
        with pytest.raises(FormatError, match="validation"):
            dataset.read_split(path)


class TestEmbeddings:
    def _random_set(self, rng, dim=8, count=20):
        emb = dataset.EmbeddingSet(dim=dim)
        for k in range(count):
            emb.add(f"rec{k % 5}", k, rng.normal(size=dim).astype(np.float32))
        return emb

    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        emb = self._random_set(rng)
        path = tmp_path / "emb.hseb"
        dataset.write_embeddings(emb, path)
        loaded = dataset.read_embeddings(path)

        assert loaded.dim == emb.dim
        assert loaded.entries.keys() == emb.entries.keys()
        for key, vec in emb.entries.items():
            got = loaded.entries[key]
            assert got.dtype == np.float32
            assert got.tobytes() == vec.tobytes()

    def test_write_read_write_stable(self, tmp_path):
        emb = self._random_set(np.random.default_rng(1))
        dataset.write_embeddings(emb, tmp_path / "a.hseb")
        again = dataset.read_embeddings(tmp_path / "a.hseb")
        dataset.write_embeddings(again, tmp_path / "b.hseb")
        assert (tmp_path / "a.hseb").read_bytes() == (tmp_path / "b.hseb").read_bytes()

    def test_insertion_order_irrelevant(self, tmp_path):
        vecs = {(f"r{i}", j): np.full(4, i * 10 + j, dtype=np.float32)
                for i in range(3) for j in range(3)}
        fwd, rev = dataset.EmbeddingSet(dim=4), dataset.EmbeddingSet(dim=4)
        for key, vec in vecs.items():
            fwd.add(*key, vec)
        for key, vec in reversed(list(vecs.items())):
            rev.add(*key, vec)
        dataset.write_embeddings(fwd, tmp_path / "fwd.hseb")
        dataset.write_embeddings(rev, tmp_path / "rev.hseb")
        assert (tmp_path / "fwd.hseb").read_bytes() == (tmp_path / "rev.hseb").read_bytes()

    def test_non_ascii_recording_id(self, tmp_path):
        emb = dataset.EmbeddingSet(dim=2)
        emb.add("rec_é", 0, np.zeros(2, dtype=np.float32))
        dataset.write_embeddings(emb, tmp_path / "e.hseb")
        assert ("rec_é", 0) in dataset.read_embeddings(tmp_path / "e.hseb").entries

    def test_empty_set_round_trips(self, tmp_path):
        dataset.write_embeddings(dataset.EmbeddingSet(dim=16), tmp_path / "e.hseb")
        loaded = dataset.read_embeddings(tmp_path / "e.hseb")
        assert loaded.dim == 16 and loaded.entries == {}

    def test_add_validates_shape_and_finiteness(self):
        emb = dataset.EmbeddingSet(dim=4)
        with pytest.raises(PreconditionError, match="shape"):
            emb.add("r", 0, np.zeros(5, dtype=np.float32))
        with pytest.raises(PreconditionError, match="finite"):
            emb.add("r", 0, np.array([1, np.nan, 0, 0], dtype=np.float32))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "e.hseb"
        path.write_bytes(b"XSEB" + b"\x00" * 12)
        with pytest.raises(FormatError, match="magic"):
            dataset.read_embeddings(path)

    def test_bad_version(self, tmp_path):
        import struct
        path = tmp_path / "e.hseb"
        path.write_bytes(struct.pack("<4sIII", b"HSEB", 9, 4, 0))
        with pytest.raises(FormatError, match="version"):
            dataset.read_embeddings(path)

    def test_truncated_entry(self, tmp_path):
        emb = self._random_set(np.random.default_rng(2), count=3)
        path = tmp_path / "e.hseb"
        dataset.write_embeddings(emb, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-5])
        with pytest.raises(FormatError, match="past end|truncated"):
            dataset.read_embeddings(path)

    def test_trailing_bytes(self, tmp_path):
        emb = self._random_set(np.random.default_rng(3), count=3)
        path = tmp_path / "e.hseb"
        dataset.write_embeddings(emb, path)
        path.write_bytes(path.read_bytes() + b"\x00\x00")
        with pytest.raises(FormatError, match="trailing"):
            dataset.read_embeddings(path)

    def test_short_file(self, tmp_path):
        path = tmp_path / "e.hseb"
        path.write_bytes(b"HSEB\x01")
        with pytest.raises(FormatError, match="short"):
            dataset.read_embeddings(path)


def _band_energy(w, lo, hi):
    spec = np.abs(np.fft.rfft(w.samples)) ** 2
    freqs = np.fft.rfftfreq(len(w.samples), d=1.0 / w.sample_rate)
    return np.sqrt(spec[(freqs >= lo) & (freqs < hi)].sum())


class TestGenerateSynthetic:
    def test_structure(self, tiny_corpus):
        assert len(tiny_corpus.patients) == 9
        by_label = {label: [p for p in tiny_corpus.patients if p.label is label]
                    for label in MurmurLabel}
        assert all(len(ps) == 3 for ps in by_label.values())
        assert by_label[MurmurLabel.PRESENT][0].patient_id == "10000"
        assert by_label[MurmurLabel.UNKNOWN][0].patient_id == "20000"
        assert by_label[MurmurLabel.ABSENT][0].patient_id == "30000"
        for p in tiny_corpus.patients:
            assert p.recording_ids == (f"{p.patient_id}_AV", f"{p.patient_id}_PV")
            for rid in p.recording_ids:
                assert tiny_corpus.wav_paths[rid].exists()

    def test_ingest_round_trip(self, tiny_corpus):
        root = next(iter(tiny_corpus.wav_paths.values())).parent
        loaded = dataset.ingest_circor(root)
        assert loaded.patients == tiny_corpus.patients
        assert loaded.wav_paths == tiny_corpus.wav_paths
        assert loaded.warnings == []

    def test_byte_deterministic(self, tmp_path):
        a = dataset.generate_synthetic(1, 2, seed=3, out_dir=tmp_path / "a")
        dataset.generate_synthetic(1, 2, seed=3, out_dir=tmp_path / "b")
        for path_a in sorted((tmp_path / "a").iterdir()):
            path_b = tmp_path / "b" / path_a.name
            assert path_a.read_bytes() == path_b.read_bytes(), path_a.name
        assert len(a.wav_paths) == 6

    def test_recordings_decode_and_stay_in_range(self, tiny_corpus):
        for rid, path in tiny_corpus.wav_paths.items():
            w = audio.decode_wav(path)
            assert w.sample_rate == dataset.SYNTH_RATE
            assert 8.0 <= len(w.samples) / w.sample_rate <= 20.0
            assert np.abs(w.samples).max() <= 0.9701

    def test_murmur_band_energy_separates_present_from_absent(self, tiny_corpus):
        # present/absent twins share a heartbeat, so the murmur band tells
        # them apart; require a clear margin on every pair
        lo, hi = dataset.MURMUR_BAND
        for i in range(3):
            for loc in ("AV", "PV"):
                present = audio.decode_wav(tiny_corpus.wav_paths[f"{10000 + i}_{loc}"])
                absent = audio.decode_wav(tiny_corpus.wav_paths[f"{30000 + i}_{loc}"])
                assert len(present.samples) == len(absent.samples)
                margin = 20 * np.log10(_band_energy(present, lo, hi)
                                       / _band_energy(absent, lo, hi))
                assert margin > 6.0

    def test_unknown_is_noise_dominated(self, tiny_corpus):
        # broadband noise shows up far above the murmur band, where clean
        # recordings carry almost nothing
        for i in range(3):
            for loc in ("AV", "PV"):
                unknown = audio.decode_wav(tiny_corpus.wav_paths[f"{20000 + i}_{loc}"])
                absent = audio.decode_wav(tiny_corpus.wav_paths[f"{30000 + i}_{loc}"])
                ratio = _band_energy(unknown, 1000, 2000) / _band_energy(absent, 1000, 2000)
                assert ratio > 3.0

    def test_rejects_empty_request(self, tmp_path):
        with pytest.raises(PreconditionError):
            dataset.generate_synthetic(0, 1, seed=0, out_dir=tmp_path)
        with pytest.raises(PreconditionError):
            dataset.generate_synthetic(1, 0, seed=0, out_dir=tmp_path)
