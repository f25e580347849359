import json
import tracemalloc

import numpy as np
import pytest
from hypothesis import given, settings, HealthCheck
from hypothesis import strategies as st

from adaptive_endpointing.environment import GROUPS, EndpointOutcome, GeneratorConfig, generate
from adaptive_endpointing.errors import CorpusError, ValidationError
from adaptive_endpointing.ingestion import (
    LogRecord, assign_splits, derive_label, is_observational, iter_split, load_split, read_corpus,
    read_manifest, records_to_corpus, write_corpus, write_records,
)

DIMS = {"audio": 3, "hypothesis": 2, "pause_duration": 1, "wakeword_duration": 1, "pitch": 2,
        "intent_domain": 8}
SPLIT_NAMES = ("train", "dev", "test")


def random_records(rng, n):
    out = []
    for i in range(n):
        cut = bool(rng.random() < 0.3)
        feats = {}
        for g in GROUPS:
            if rng.random() < 0.3:
                continue  # optional group left out
            if g in ("audio", "hypothesis", "pitch"):
                feats[g] = rng.normal(size=DIMS[g]).tolist()
            elif g == "intent_domain":
                feats[g] = int(rng.integers(8))
            else:
                feats[g] = float(rng.lognormal(6, 0.5))
        relaxed = None
        if rng.random() < 0.8:
            relaxed = EndpointOutcome(int(rng.integers(0, 3000)), cut and bool(rng.random() < 0.1))
        out.append(LogRecord(
            id=int(rng.integers(0, 2**62)) if i % 7 == 0 else i,
            split=SPLIT_NAMES[int(rng.integers(3))],
            outcome_standard=EndpointOutcome(int(rng.integers(0, 3000)), cut),
            features=feats,
            outcome_relaxed=relaxed,
            label=int(cut) if rng.random() < 0.5 else None,
            latent_slowness=float(rng.normal()) if rng.random() < 0.5 else None,
        ))
    return out


class TestDeriveLabel:
    def test_rule(self):
        r = LogRecord(0, "train", EndpointOutcome(10, True))
        assert derive_label(r) == 1 == derive_label(r)
        assert derive_label(LogRecord(0, "train", EndpointOutcome(10, False))) == 0


class TestSplits:
    def test_default_ratio_sizes(self):
        s = assign_splits(10_000, (0.8, 0.1, 0.1), seed=3)
        assert np.bincount(s, minlength=3).tolist() == [8000, 1000, 1000]

    def test_all_train(self):
        assert set(assign_splits(17, (1, 0, 0))) == {0}

    @given(st.integers(0, 5000), st.integers(0, 2**32 - 1))
    def test_sizes_sum_and_deterministic(self, n, seed):
        a = assign_splits(n, (0.8, 0.1, 0.1), seed)
        assert len(a) == n
        np.testing.assert_array_equal(a, assign_splits(n, (0.8, 0.1, 0.1), seed))
        sizes = np.bincount(a, minlength=3)
        assert np.all(np.abs(sizes - np.array([0.8, 0.1, 0.1]) * n) < 1)

    def test_bad_ratios(self):
        with pytest.raises(ValidationError):
            assign_splits(10, (0.5, 0.5, 0.5))


class TestRoundTrip:
    def test_random_records(self, tmp_path):
        records = random_records(np.random.default_rng(0), 1000)
        write_records(records, tmp_path, feature_dims=DIMS)
        _, stream = read_corpus(tmp_path)
        back = {r.id: r for r in stream}
        assert len(back) == len(records)
        for r in records:
            assert back[r.id] == r
            assert back[r.id].to_json() == r.to_json()

    @settings(max_examples=25, suppress_health_check=[HealthCheck.function_scoped_fixture])
    @given(st.integers(0, 2**32 - 1), st.integers(0, 40))
    def test_property(self, tmp_path_factory, seed, n):
        path = tmp_path_factory.mktemp("rt")
        records = random_records(np.random.default_rng(seed), n)
        write_records(records, path, feature_dims=DIMS)
        _, stream = read_corpus(path)
        assert sorted(stream, key=lambda r: r.id) == sorted(records, key=lambda r: r.id)

    def test_generated_corpus_exact(self, tmp_path):
        c = generate(GeneratorConfig(seed=4, n_utterances=500))
        manifest = write_corpus(c, tmp_path, seed=1)
        parts = [load_split(tmp_path, s) for s in SPLIT_NAMES]
        assert sum(len(p) for p in parts) == 500
        for p in parts:
            sub = c.subset(p.ids)
            for name in ("audio", "hypothesis", "pitch", "pause_duration", "wakeword_duration",
                         "intent_domain", "latent_slowness", "standard_latency", "standard_cutoff",
                         "relaxed_latency", "relaxed_cutoff", "labels"):
                assert getattr(p, name).tobytes() == getattr(sub, name).astype(getattr(p, name).dtype).tobytes(), name
        assert manifest["splits"]["train"]["count"] == 400

    def test_utterance_list_input(self, tmp_path):
        c = generate(GeneratorConfig(seed=4, n_utterances=30))
        m = write_corpus(list(c), tmp_path / "a", seed=2)
        m2 = write_corpus(c, tmp_path / "b", seed=2)
        assert m["splits"] == m2["splits"]

    def test_byte_identical_rewrite(self, tmp_path):
        c = generate(GeneratorConfig(seed=4, n_utterances=300))
        write_corpus(c, tmp_path / "a", seed=5)
        write_corpus(c, tmp_path / "b", seed=5)
        for name in ("manifest.json", "train.jsonl", "dev.jsonl", "test.jsonl"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


class TestReader:
    def test_empty_corpus(self, tmp_path):
        write_records([], tmp_path, feature_dims=DIMS)
        manifest, stream = read_corpus(tmp_path)
        assert list(stream) == []
        assert manifest["splits"]["train"]["count"] == 0
        assert len(records_to_corpus([], DIMS)) == 0

    def test_manifest_rate_matches_recount(self, tmp_path):
        c = generate(GeneratorConfig(seed=8, n_utterances=5000))
        manifest = write_corpus(c, tmp_path)
        for s in SPLIT_NAMES:
            labels = [derive_label(r) for r in iter_split(tmp_path, s)]
            assert manifest["splits"][s]["positive_rate"] == round(sum(labels) / len(labels), 4)
            assert manifest["splits"][s]["positives"] == sum(labels)

    def test_inconsistent_label_names_record(self, tmp_path):
        rec = LogRecord(4242, "train", EndpointOutcome(300, False))
        write_records([rec], tmp_path, feature_dims=DIMS)
        path = tmp_path / "train.jsonl"
        d = json.loads(path.read_text())
        d["label"] = 1
        path.write_text(json.dumps(d) + "\n")
        with pytest.raises(CorpusError, match="4242"):
            list(iter_split(tmp_path, "train", verify=False))

    def test_malformed_line_reports_location(self, tmp_path):
        write_records(random_records(np.random.default_rng(1), 5), tmp_path, feature_dims=DIMS)
        path = tmp_path / "dev.jsonl"
        with open(path, "a") as fh:
            fh.write("{not json\n")
        n_lines = len(path.read_text().splitlines())
        with pytest.raises(CorpusError, match=f"dev.jsonl:{n_lines}"):
            list(iter_split(tmp_path, "dev", verify=False))

    def test_checksum_mismatch(self, tmp_path):
        write_records(random_records(np.random.default_rng(1), 20), tmp_path, feature_dims=DIMS)
        with open(tmp_path / "test.jsonl", "a") as fh:
            fh.write("\n")
        with pytest.raises(CorpusError, match="checksum"):
            list(iter_split(tmp_path, "test"))

    def test_version_mismatch(self, tmp_path):
        write_records([], tmp_path, feature_dims=DIMS)
        m = json.loads((tmp_path / "manifest.json").read_text())
        m["version"] = 2
        (tmp_path / "manifest.json").write_text(json.dumps(m))
        with pytest.raises(CorpusError, match="version"):
            read_manifest(tmp_path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(CorpusError):
            read_manifest(tmp_path)

    def test_relaxed_cutoff_without_standard_rejected(self, tmp_path):
        rec = LogRecord(1, "train", EndpointOutcome(300, False), outcome_relaxed=EndpointOutcome(900, True))
        write_records([rec], tmp_path, feature_dims=DIMS)
        with pytest.raises(CorpusError, match="record 1"):
            list(iter_split(tmp_path, "train"))

    def test_observational_flag(self, tmp_path):
        rec = LogRecord(1, "train", EndpointOutcome(300, True))
        write_records([rec], tmp_path, feature_dims=DIMS)
        assert is_observational(read_manifest(tmp_path))
        c = load_split(tmp_path, "train")
        assert not c.has_relaxed and c.labels.tolist() == [1]
        with pytest.raises(CorpusError):
            c.decode(0, 1)

    def test_streaming_memory_is_bounded(self, tmp_path):
        peaks = {}
        for n in (2000, 20_000):
            path = tmp_path / str(n)
            write_corpus(generate(GeneratorConfig(seed=1, n_utterances=n)), path, split_ratios=(1, 0, 0))
            tracemalloc.start()
            count = sum(1 for _ in iter_split(path, "train"))
            _, peaks[n] = tracemalloc.get_traced_memory()
            tracemalloc.stop()
            assert count == n
        # ten times the records must not cost anywhere near ten times the memory
        assert peaks[20_000] < 1.5 * peaks[2000] + 64 * 1024
        # the checksum pass reads in 1 MiB blocks, which dominates the peak
        assert peaks[20_000] < 4 * 1024 * 1024
