import csv
import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from adaptive_endpointing.environment import EndpointOutcome, ObservationSpec, observe_matrix
from adaptive_endpointing.errors import InsufficientSampleError, ValidationError
from adaptive_endpointing.evaluation import (
    MetricsReport, TradeoffCurve, classifier_metrics, dtm95_99, early_ep_rate, evaluate_policy,
    percentile, reports_to_csv, sweep_tradeoff, tm95,
)
from adaptive_endpointing.policies import (
    OraclePolicy, StaticPolicy, SupervisedHyperparams, supervised_train, threshold_grid,
)

from .oracles import brute_dtm95_99, brute_early_ep, brute_tm95, exact_percentile

latencies = st.lists(st.integers(0, 5000), min_size=1, max_size=400)


def random_sample(rng):
    n = int(rng.integers(1, 10_001))
    kind = rng.integers(3)
    if kind == 0:
        return rng.integers(0, 3000, n)
    if kind == 1:
        return np.rint(np.exp(rng.normal(6, 0.7, n)))
    return rng.integers(0, 5, n) * 100  # heavy ties


class TestPercentile:
    @pytest.mark.parametrize("n", [1, 2, 4, 7, 8, 10, 21, 101, 1000])
    @pytest.mark.parametrize("q", [0, 50, 95, 99, 100])
    def test_matches_numpy_linear(self, n, q):
        x = np.random.default_rng(n).integers(0, 100, n).astype(float)
        assert percentile(x, q) == pytest.approx(np.percentile(x, q), rel=1e-12)
        assert percentile(x, q) == pytest.approx(float(exact_percentile(sorted(x), q)), rel=1e-12)


class TestTm95:
    def test_constant(self):
        assert tm95([100, 100, 100]) == 100

    def test_one_to_thousand(self):
        x = np.arange(1, 1001)
        assert tm95(x) == pytest.approx(brute_tm95(x), rel=1e-12)
        assert tm95(x) == pytest.approx(475.5)

    def test_trims_outlier(self):
        assert tm95([1, 1_000_000]) < np.mean([1, 1_000_000])

    def test_empty(self):
        with pytest.raises(ValidationError):
            tm95([])

    @given(latencies)
    def test_oracle(self, x):
        assert tm95(x) == pytest.approx(brute_tm95(x), rel=1e-9)

    @given(latencies, st.randoms())
    def test_permutation_invariant(self, x, rnd):
        y = list(x)
        rnd.shuffle(y)
        assert tm95(x) == tm95(y)


class TestDtm95:
    def test_constant(self):
        assert dtm95_99([7] * 50) == 7

    def test_one_to_thousand(self):
        x = np.arange(1, 1001)
        assert dtm95_99(x) == pytest.approx(brute_dtm95_99(x), rel=1e-12)
        # band is [950.05, 990.01], i.e. 951..990
        assert dtm95_99(x) == pytest.approx(970.5)

    def test_insufficient(self):
        with pytest.raises(InsufficientSampleError):
            dtm95_99([1, 2])

    @given(latencies)
    def test_oracle_and_ordering(self, x):
        expected = brute_dtm95_99(x)
        if expected is None:
            with pytest.raises(InsufficientSampleError):
                dtm95_99(x)
        else:
            assert dtm95_99(x) == pytest.approx(expected, rel=1e-9)
            assert dtm95_99(x) >= tm95(x)

    def test_inclusive_boundaries(self):
        # n=101 puts P95 and P99 exactly on order statistics 95 and 99
        x = list(range(101))
        assert dtm95_99(x) == pytest.approx(97.0)

    def test_random_samples_against_oracle(self):
        rng = np.random.default_rng(123)
        for _ in range(100):
            x = random_sample(rng)
            assert tm95(x) == pytest.approx(brute_tm95(x), rel=1e-9)
            b = brute_dtm95_99(x)
            if b is not None:
                assert dtm95_99(x) == pytest.approx(b, rel=1e-9)


class TestEarlyEp:
    def test_examples(self):
        assert early_ep_rate([EndpointOutcome(5, False)] * 10) == 0
        assert early_ep_rate([True] * 25 + [False] * 975) == 2.5
        assert early_ep_rate(np.ones(4, bool)) == 100

    def test_empty(self):
        with pytest.raises(ValidationError):
            early_ep_rate([])

    @given(st.lists(st.booleans(), min_size=1))
    def test_oracle(self, c):
        assert early_ep_rate(c) == pytest.approx(brute_early_ep(c), rel=1e-12)


class TestClassifierMetrics:
    def test_all_standard(self):
        m = classifier_metrics([0, 0, 0, 0], [0, 1, 0, 0])
        assert m["precision"] is None and m["recall"] == 0.0 and m["f1"] is None
        assert m["accuracy"] == 75.0

    def test_all_relaxed(self):
        labels = [1] + [0] * 39
        m = classifier_metrics([1] * 40, labels)
        assert m["recall"] == 100.0 and m["precision"] == pytest.approx(2.5)

    def test_perfect(self):
        labels = [0, 1, 1, 0]
        assert set(classifier_metrics(labels, labels).values()) == {100.0}

    def test_no_positives_anywhere(self):
        m = classifier_metrics([0, 0], [0, 0])
        assert m["recall"] is None and m["precision"] is None

    def test_length_mismatch(self):
        with pytest.raises(ValidationError):
            classifier_metrics([0, 1], [0])

    @given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1), st.randoms())
    def test_permutation_invariant_and_f1_harmonic(self, pairs, rnd):
        shuffled = list(pairs)
        rnd.shuffle(shuffled)
        a = classifier_metrics(*zip(*pairs))
        assert a == classifier_metrics(*zip(*shuffled))
        if a["f1"] is not None and a["precision"] + a["recall"] > 0:
            assert a["f1"] == pytest.approx(2 / (1 / a["precision"] + 1 / a["recall"]))
        assert all(v is None or 0 <= v <= 100 for v in a.values())


class TestEvaluatePolicy:
    def test_standard_only_identity(self, small_corpus):
        c = small_corpus
        r = evaluate_policy(StaticPolicy(), c, relative=True)
        assert r.early_ep_rate == pytest.approx(100 * c.positive_rate)
        assert r.tm95 == tm95(c.standard_latency)
        assert set(r.relative_to_baseline.values()) == {0.0}
        assert r.precision is None

    def test_relaxed_only_is_dual_rate(self, small_corpus):
        r = evaluate_policy(StaticPolicy("relaxed_only"), small_corpus)
        assert r.early_ep_rate == pytest.approx(100 * small_corpus.dual_cutoff_rate)

    def test_oracle(self, small_corpus):
        r = evaluate_policy(OraclePolicy(), small_corpus)
        assert r.accuracy == 100.0
        assert r.early_ep_rate == pytest.approx(100 * small_corpus.dual_cutoff_rate)

    def test_empty_corpus(self, small_corpus):
        with pytest.raises(ValidationError):
            evaluate_policy(StaticPolicy(), small_corpus.subset(np.arange(0)))


@pytest.fixture(scope="module")
def classifier_and_split(small_corpus):
    c = small_corpus
    x = observe_matrix(c, ObservationSpec())
    clf = supervised_train(x[:15_000], c.labels[:15_000], SupervisedHyperparams(epochs=3))
    return clf, c.subset(np.arange(15_000, 20_000))


class TestTradeoff:
    def test_threshold_endpoints(self, classifier_and_split):
        clf, test = classifier_and_split
        grid = threshold_grid(11)
        curve = sweep_tradeoff(clf.with_threshold, grid, test)
        rel = evaluate_policy(StaticPolicy("relaxed_only"), test)
        std = evaluate_policy(StaticPolicy(), test)
        for point, ref in ((curve.points[0], rel), (curve.points[-1], std)):
            assert point.early_ep_rate == ref.early_ep_rate
            assert point.tm95 == ref.tm95 and point.dtm95_99 == ref.dtm95_99
            assert point.precision == ref.precision and point.recall == ref.recall

    def test_threshold_nesting(self, classifier_and_split):
        clf, test = classifier_and_split
        grid = threshold_grid(51)
        curve = sweep_tradeoff(clf.with_threshold, grid, test)
        ep = [p.early_ep_rate for p in curve.points]
        frac = [p.relaxed_fraction for p in curve.points]
        # tau increases along the grid, so early EP can only go up
        assert all(b >= a for a, b in zip(ep, ep[1:]))
        assert all(b <= a for a, b in zip(frac, frac[1:]))

    def test_knobs_must_be_monotone(self):
        with pytest.raises(ValidationError):
            TradeoffCurve("tau", [0.1, 0.3, 0.2])
        TradeoffCurve("tau", [0.9, 0.5, 0.1])

    def test_needs_two_points(self, classifier_and_split):
        clf, test = classifier_and_split
        with pytest.raises(ValidationError):
            sweep_tradeoff(clf.with_threshold, [0.5], test)

    def test_round_trip(self, classifier_and_split):
        clf, test = classifier_and_split
        curve = sweep_tradeoff(clf.with_threshold, [0.2, 0.5, 0.8], test)
        back = TradeoffCurve.from_dict(curve.to_dict())
        assert back.to_dict() == curve.to_dict()


class TestSerialization:
    def test_csv_na(self, small_corpus):
        r = evaluate_policy(StaticPolicy(), small_corpus, label="standard_only", relative=True)
        rows = list(csv.DictReader(io.StringIO(reports_to_csv([r]))))
        assert rows[0]["precision"] == "NA" and rows[0]["f1"] == "NA"
        assert float(rows[0]["tm95"]) == r.tm95

    def test_report_round_trip(self, small_corpus):
        r = evaluate_policy(OraclePolicy(), small_corpus, relative=True)
        assert MetricsReport.from_dict(r.to_dict()) == r
