import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from adaptive_endpointing.environment import (
    GROUPS, N_DOMAINS, Action, Corpus, EndpointOutcome, GeneratorConfig, ObservationSpec, RewardSpec,
    cutoff_intercept, decode, feature_dim, feature_slices, generate, generate_chunks, iter_utterances,
    observe, observe_matrix, reward, reward_array, visible_fractions,
)
from adaptive_endpointing.errors import ConfigError, CorpusError, ValidationError


def summary(matrix):
    return matrix.mean(axis=1)


class TestCalibration:
    def test_intercept_hits_target_by_monte_carlo(self):
        b = cutoff_intercept(5.0, 0.025)
        s = np.random.default_rng(0).standard_normal(2_000_000)
        rate = np.mean(1.0 / (1.0 + np.exp(-(5.0 * s + b))))
        assert rate == pytest.approx(0.025, abs=2e-4)

    def test_default_rates(self, default_corpus):
        assert abs(default_corpus.positive_rate - 0.025) <= 0.003
        assert abs(default_corpus.dual_cutoff_rate - 0.0002) <= 0.0002

    def test_dual_zero(self):
        c = generate(GeneratorConfig(seed=3, n_utterances=30_000, target_dual_cutoff_rate=0.0))
        assert not c.relaxed_cutoff.any()
        assert c.standard_cutoff.any()

    def test_infeasible_targets(self):
        with pytest.raises(ConfigError):
            GeneratorConfig(target_standard_cutoff_rate=0.01, target_dual_cutoff_rate=0.02)
        with pytest.raises(ConfigError):
            GeneratorConfig(target_standard_cutoff_rate=0.0)
        with pytest.raises(ConfigError):
            GeneratorConfig(informativeness={"audio": 1.5})
        with pytest.raises(ConfigError):
            GeneratorConfig(informativeness={"volume": 0.5})

    def test_zero_utterances(self):
        c = generate(GeneratorConfig(n_utterances=0))
        assert len(c) == 0
        assert c.feature_dims["audio"] == 16


class TestGenerator:
    def test_invariants(self, small_corpus):
        c = small_corpus
        c.validate()
        np.testing.assert_array_equal(c.labels == 1, c.standard_cutoff)
        assert not np.any(c.relaxed_cutoff & ~c.standard_cutoff)
        both_fine = ~c.standard_cutoff & ~c.relaxed_cutoff
        assert np.all(c.relaxed_latency[both_fine] >= c.standard_latency[both_fine])
        assert c.standard_latency.dtype == np.int64 and np.all(c.standard_latency >= 0)
        assert np.all((c.intent_domain >= 0) & (c.intent_domain < N_DOMAINS))

    def test_relaxed_mean_latency_higher(self, small_corpus):
        assert small_corpus.relaxed_latency.mean() > small_corpus.standard_latency.mean()

    @pytest.mark.parametrize("group", ["audio", "hypothesis", "pitch"])
    def test_full_informativeness_vectors(self, group):
        cfg = GeneratorConfig(seed=1, n_utterances=5000, informativeness={group: 1.0})
        c = generate(cfg)
        values = getattr(c, group)
        np.testing.assert_allclose(values, np.repeat(c.latent_slowness[:, None], values.shape[1], 1))
        assert np.corrcoef(summary(values), c.latent_slowness)[0, 1] == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("group", ["pause_duration", "wakeword_duration"])
    def test_full_informativeness_durations(self, group):
        c = generate(GeneratorConfig(seed=1, n_utterances=5000, informativeness={group: 1.0}))
        # durations are log-normal in the latent, so the log is exactly linear
        r = np.corrcoef(np.log(getattr(c, group)), c.latent_slowness)[0, 1]
        assert r == pytest.approx(1.0, abs=1e-12)

    def test_full_informativeness_intent_is_monotone_bucket(self):
        c = generate(GeneratorConfig(seed=1, n_utterances=5000, informativeness={"intent_domain": 1.0}))
        order = np.argsort(c.latent_slowness)
        assert np.all(np.diff(c.intent_domain[order]) >= 0)

    def test_weak_groups_less_correlated(self, small_corpus):
        c = small_corpus
        r = {g: abs(np.corrcoef(summary(getattr(c, g)), c.latent_slowness)[0, 1])
             for g in ("audio", "pitch")}
        assert r["audio"] > 0.8 > 0.3 > r["pitch"]

    def test_seed_determinism_and_prefix_stability(self):
        a = generate(GeneratorConfig(seed=5, n_utterances=9000))
        b = generate(GeneratorConfig(seed=5, n_utterances=9000))
        c = generate(GeneratorConfig(seed=5, n_utterances=8192))
        for name in ("audio", "standard_latency", "relaxed_cutoff", "pause_duration"):
            assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
            np.testing.assert_array_equal(getattr(a, name)[:8192], getattr(c, name))

    def test_streaming_matches_materialized(self):
        cfg = GeneratorConfig(seed=2, n_utterances=300)
        c = generate(cfg)
        for i, u in enumerate(iter_utterances(cfg)):
            assert u.outcome_standard == c[i].outcome_standard
            np.testing.assert_array_equal(u.features.flatten(), c[i].features.flatten())
        assert sum(len(ch) for ch in generate_chunks(cfg)) == 300


class TestDecode:
    def test_lookup(self, small_corpus):
        u = small_corpus[0]
        assert decode(u, Action.STANDARD) is u.outcome_standard
        assert decode(u, Action.RELAXED) is u.outcome_relaxed

    def test_relaxed_rescues_class1(self, small_corpus):
        c = small_corpus
        idx = np.flatnonzero((c.labels == 1) & ~c.relaxed_cutoff)[:50]
        for i in idx:
            assert decode(c[i], Action.RELAXED).cutoff is False
            assert c.decode(i, Action.RELAXED) == c[i].outcome_relaxed

    def test_observational_corpus(self, small_corpus):
        c = small_corpus.subset(np.arange(10))
        c.relaxed_latency = c.relaxed_cutoff = None
        with pytest.raises(CorpusError):
            c.decode(0, Action.RELAXED)
        with pytest.raises(CorpusError):
            decode(c[0], Action.RELAXED)
        assert c.decode(0, Action.STANDARD) == c[0].outcome_standard

    def test_decode_many(self, small_corpus):
        c = small_corpus.subset(np.arange(100))
        actions = np.arange(100) % 2
        lat, cut = c.decode_many(actions)
        for i in range(100):
            assert c.decode(i, actions[i]) == EndpointOutcome(int(lat[i]), bool(cut[i]))


class TestReward:
    def test_examples(self):
        assert reward(EndpointOutcome(123, True), RewardSpec(0.0, 1.0)) == -1.0
        assert reward(EndpointOutcome(500, False), RewardSpec(0.001, 2.0)) == pytest.approx(-0.5)

    def test_array_matches_scalar(self):
        spec = RewardSpec(0.002, 3.0)
        lat = np.array([10, 400, 900])
        cut = np.array([True, False, True])
        expected = [reward(EndpointOutcome(int(l), bool(c)), spec) for l, c in zip(lat, cut)]
        np.testing.assert_allclose(reward_array(lat, cut, spec), expected)

    def test_bad_specs(self):
        with pytest.raises(ValidationError):
            RewardSpec(0.0, 0.0)
        with pytest.raises(ValidationError):
            RewardSpec(-1.0, 1.0)
        with pytest.raises(ValidationError):
            RewardSpec(float("nan"), 1.0)

    def test_huge_beta_optimal_equals_oracle(self, small_corpus):
        c = small_corpus
        spec = RewardSpec(0.001, 0.001 * 10 * max(c.relaxed_latency.max(), c.standard_latency.max()))
        r_std = reward_array(c.standard_latency, c.standard_cutoff, spec)
        r_rel = reward_array(c.relaxed_latency, c.relaxed_cutoff, spec)
        best = np.where(r_rel > r_std, 1, 0)
        # dual cutoffs have no better option; the oracle still picks relaxed there
        dual = c.relaxed_cutoff & c.standard_cutoff
        np.testing.assert_array_equal(best[~dual], c.labels[~dual])


class TestObserve:
    def test_identity_at_full_view(self, small_corpus):
        spec = ObservationSpec()
        for i in range(20):
            u = small_corpus[i]
            np.testing.assert_array_equal(observe(u, spec).flatten(), u.features.flatten())

    def test_only_enabled_groups_survive(self, small_corpus):
        u = small_corpus[3]
        f = observe(u, ObservationSpec(visible_fraction=40, enabled_groups=("hypothesis",)))
        for g in GROUPS:
            if g != "hypothesis":
                assert np.all(np.asarray(f.group(g)) == 0.0)
        assert np.any(f.hypothesis != 0)

    def test_static_groups_ignore_fraction(self, small_corpus):
        u = small_corpus[4]
        f = observe(u, ObservationSpec(visible_fraction=10))
        assert f.pause_duration == u.features.pause_duration
        np.testing.assert_array_equal(f.pitch, u.features.pitch)
        assert not np.allclose(f.audio, u.features.audio)

    def test_less_audio_less_signal(self, small_corpus):
        c = small_corpus
        corr = {}
        for x in (20, 100):
            m = observe_matrix(c, ObservationSpec(visible_fraction=x))
            corr[x] = np.corrcoef(summary(m[:, feature_slices(c.feature_dims)["audio"]]), c.latent_slowness)[0, 1]
        assert corr[20] < corr[100]

    def test_matrix_matches_per_utterance(self, small_corpus):
        c = small_corpus.subset(np.arange(40))
        for spec in (ObservationSpec(), ObservationSpec(visible_fraction=35, seed=4),
                     ObservationSpec(mode="first_segment", seed=9),
                     ObservationSpec(enabled_groups=("pitch", "intent_domain"))):
            m = observe_matrix(c, spec)
            assert m.shape == (40, feature_dim(c.feature_dims)) == (40, 46)
            for i in range(40):
                np.testing.assert_allclose(m[i], observe(c[i], spec).flatten(), rtol=0, atol=1e-15)

    def test_noise_is_keyed_by_id(self, small_corpus):
        c = small_corpus
        spec = ObservationSpec(visible_fraction=30, seed=1)
        whole = observe_matrix(c.subset(np.arange(100)), spec)
        part = observe_matrix(c.subset(np.arange(50, 60)), spec)
        np.testing.assert_array_equal(whole[50:60], part)

    def test_first_segment_fractions(self):
        x = visible_fractions(np.arange(50_000), ObservationSpec(mode="first_segment"))
        assert np.all((x >= 5) & (x <= 100))
        assert x.mean() == pytest.approx(30, abs=0.3)

    @pytest.mark.parametrize("x", [0.0, -5.0, 100.5])
    def test_bad_fraction(self, x):
        with pytest.raises(ValidationError):
            ObservationSpec(visible_fraction=x)

    @given(st.floats(0.5, 100.0))
    def test_fraction_only_touches_time_dependent_groups(self, x):
        c = generate(GeneratorConfig(seed=11, n_utterances=30))
        full = observe_matrix(c, ObservationSpec())
        seen = observe_matrix(c, ObservationSpec(visible_fraction=x))
        sl = feature_slices(c.feature_dims)
        static = np.r_[sl["pause_duration"].start:sl["intent_domain"].stop]
        np.testing.assert_array_equal(seen[:, static], full[:, static])
        if x < 100:
            assert not np.array_equal(seen[:, sl["audio"]], full[:, sl["audio"]])


class TestCorpus:
    def test_concatenate_and_subset(self, small_corpus):
        a = small_corpus.subset(np.arange(10))
        b = small_corpus.subset(np.arange(10, 25))
        c = Corpus.concatenate([a, b])
        np.testing.assert_array_equal(c.ids, small_corpus.ids[:25])
        np.testing.assert_array_equal(c.labels, small_corpus.labels[:25])
