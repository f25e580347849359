"""Synthetic endpointing world.

Every utterance has an unobservable slowness score. Slow speakers are more
likely to be cut off by the standard configuration; the relaxed
configuration rescues almost all of them at the cost of extra latency.
Feature groups are noisy views of the slowness score whose quality is set
per group, and :func:`observe` degrades the time-dependent groups when only
part of the utterance has been heard.

A generated corpus stores the outcome of *both* configurations for every
utterance. Online agents only ever see the outcome of the action they took
(see :mod:`adaptive_endpointing.policies`), while evaluation and the oracle
use both.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from enum import IntEnum
from typing import Iterator, Optional

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from .errors import ConfigError, CorpusError, ValidationError


class Action(IntEnum):
    STANDARD = 0
    RELAXED = 1


N_ACTIONS = len(Action)
N_DOMAINS = 8

GROUPS = ("audio", "hypothesis", "pause_duration", "wakeword_duration", "pitch", "intent_domain")
TIME_DEPENDENT_GROUPS = ("audio", "hypothesis")

DEFAULT_INFORMATIVENESS = {
    "audio": 0.9,
    "hypothesis": 0.9,
    "intent_domain": 0.5,
    "pause_duration": 0.35,
    "pitch": 0.1,
    "wakeword_duration": 0.05,
}

_CHUNK = 8192
# standard-normal octile edges; bucketing a N(0,1) score with them is uniform over domains
_DOMAIN_EDGES = np.array([-1.15034938, -0.67448975, -0.31863936, 0.0, 0.31863936, 0.67448975, 1.15034938])


@dataclass(frozen=True)
class EndpointOutcome:
    latency: int
    cutoff: bool

    def __post_init__(self):
        if not np.isfinite(self.latency) or self.latency < 0:
            raise ValidationError(f"latency must be finite and >= 0, got {self.latency}")


@dataclass(frozen=True)
class RewardSpec:
    """Mixing weights of the latency/cutoff reward.

    ``alpha_latency`` is reward lost per millisecond, ``beta_cutoff`` per
    early cutoff.
    """

    alpha_latency: float = 0.001
    beta_cutoff: float = 6.0

    def __post_init__(self):
        if not (np.isfinite(self.alpha_latency) and np.isfinite(self.beta_cutoff)):
            raise ValidationError("reward weights must be finite")
        if self.alpha_latency < 0 or self.beta_cutoff < 0:
            raise ValidationError("reward weights must be nonnegative")
        if self.alpha_latency == 0 and self.beta_cutoff == 0:
            raise ValidationError("reward weights cannot both be zero")

    @property
    def ratio(self) -> float:
        return self.beta_cutoff / self.alpha_latency if self.alpha_latency else float("inf")


def reward(outcome: EndpointOutcome, spec: RewardSpec) -> float:
    """Negative weighted cost of an outcome; higher is better."""
    return -(spec.alpha_latency * outcome.latency + spec.beta_cutoff * float(outcome.cutoff))


def reward_array(latency, cutoff, spec: RewardSpec) -> np.ndarray:
    return -(spec.alpha_latency * np.asarray(latency, dtype=np.float64)
             + spec.beta_cutoff * np.asarray(cutoff, dtype=np.float64))


@dataclass
class FeatureVector:
    audio: np.ndarray
    hypothesis: np.ndarray
    pause_duration: float
    wakeword_duration: float
    pitch: np.ndarray
    intent_domain: np.ndarray  # one-hot over N_DOMAINS

    def group(self, name: str):
        return getattr(self, name)

    def flatten(self) -> np.ndarray:
        """Network input: durations in seconds, everything else as stored."""
        return np.concatenate([
            self.audio,
            self.hypothesis,
            [self.pause_duration / 1000.0],
            [self.wakeword_duration / 1000.0],
            self.pitch,
            self.intent_domain,
        ]).astype(np.float64)


@dataclass
class Utterance:
    id: int
    latent_slowness: float
    features: FeatureVector
    outcome_standard: EndpointOutcome
    outcome_relaxed: Optional[EndpointOutcome]

    @property
    def label(self) -> int:
        return int(self.outcome_standard.cutoff)


def decode(utterance: Utterance, chosen: Action) -> EndpointOutcome:
    """Outcome of running the chosen configuration on the utterance."""
    if Action(chosen) == Action.STANDARD:
        return utterance.outcome_standard
    if utterance.outcome_relaxed is None:
        raise CorpusError(f"utterance {utterance.id} has no relaxed outcome")
    return utterance.outcome_relaxed


@dataclass
class GeneratorConfig:
    seed: int = 0
    n_utterances: int = 100_000
    target_standard_cutoff_rate: float = 0.025
    target_dual_cutoff_rate: float = 0.0002
    cutoff_slope: float = 5.0
    base_latency_median_ms: float = 350.0
    base_latency_sigma: float = 0.5
    relaxed_penalty_shift_ms: float = 200.0
    relaxed_penalty_mean_ms: float = 600.0
    pause_median_ms: float = 400.0
    pause_log_sigma: float = 0.5
    wakeword_median_ms: float = 600.0
    wakeword_log_sigma: float = 0.2
    audio_dim: int = 16
    hypothesis_dim: int = 16
    pitch_dim: int = 4
    informativeness: dict = field(default_factory=lambda: dict(DEFAULT_INFORMATIVENESS))

    def __post_init__(self):
        self.informativeness = {**DEFAULT_INFORMATIVENESS, **dict(self.informativeness)}
        self.validate()

    def validate(self) -> None:
        if self.n_utterances < 0:
            raise ConfigError("n_utterances must be >= 0")
        if not 0 < self.target_standard_cutoff_rate < 1:
            raise ConfigError("target_standard_cutoff_rate must lie in (0, 1)")
        if not 0 <= self.target_dual_cutoff_rate < 1:
            raise ConfigError("target_dual_cutoff_rate must lie in [0, 1)")
        if self.target_dual_cutoff_rate > self.target_standard_cutoff_rate:
            raise ConfigError("dual cutoff rate cannot exceed the standard cutoff rate")
        if self.cutoff_slope <= 0:
            raise ConfigError("cutoff_slope must be positive")
        if self.relaxed_penalty_mean_ms < self.relaxed_penalty_shift_ms or self.relaxed_penalty_shift_ms < 0:
            raise ConfigError("relaxed penalty needs 0 <= shift <= mean")
        if min(self.audio_dim, self.hypothesis_dim, self.pitch_dim) < 1:
            raise ConfigError("feature group dimensions must be >= 1")
        unknown = set(self.informativeness) - set(GROUPS)
        if unknown:
            raise ConfigError(f"unknown feature groups {sorted(unknown)}")
        for name, w in self.informativeness.items():
            if not 0 <= w <= 1:
                raise ConfigError(f"informativeness of {name} must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def feature_dims(self) -> dict:
        return {
            "audio": self.audio_dim,
            "hypothesis": self.hypothesis_dim,
            "pause_duration": 1,
            "wakeword_duration": 1,
            "pitch": self.pitch_dim,
            "intent_domain": N_DOMAINS,
        }


def cutoff_intercept(slope: float, target_rate: float) -> float:
    """Intercept b with E[sigmoid(slope * s + b)] = target_rate for s ~ N(0, 1)."""
    nodes, weights = np.polynomial.hermite_e.hermegauss(120)
    weights = weights / weights.sum()

    def gap(b):
        return float(weights @ expit(slope * nodes + b)) - target_rate

    return brentq(gap, -60.0, 60.0, xtol=1e-14)


@dataclass
class Corpus:
    """Column-oriented collection of utterances.

    ``outcome_relaxed`` arrays are ``None`` for standard-only observational
    logs; such corpora cannot drive the oracle or replay the relaxed arm.
    """

    ids: np.ndarray
    latent_slowness: np.ndarray
    audio: np.ndarray
    hypothesis: np.ndarray
    pause_duration: np.ndarray
    wakeword_duration: np.ndarray
    pitch: np.ndarray
    intent_domain: np.ndarray
    standard_latency: np.ndarray
    standard_cutoff: np.ndarray
    relaxed_latency: Optional[np.ndarray] = None
    relaxed_cutoff: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.labels is None:
            self.labels = derive_labels(self.standard_cutoff)

    def __len__(self):
        return len(self.ids)

    def __iter__(self) -> Iterator[Utterance]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> Utterance:
        return Utterance(
            id=int(self.ids[i]),
            latent_slowness=float(self.latent_slowness[i]),
            features=self.features(i),
            outcome_standard=EndpointOutcome(int(self.standard_latency[i]), bool(self.standard_cutoff[i])),
            outcome_relaxed=(
                EndpointOutcome(int(self.relaxed_latency[i]), bool(self.relaxed_cutoff[i]))
                if self.has_relaxed else None
            ),
        )

    @property
    def has_relaxed(self) -> bool:
        return self.relaxed_latency is not None and self.relaxed_cutoff is not None

    @property
    def feature_dims(self) -> dict:
        return {
            "audio": self.audio.shape[1],
            "hypothesis": self.hypothesis.shape[1],
            "pause_duration": 1,
            "wakeword_duration": 1,
            "pitch": self.pitch.shape[1],
            "intent_domain": N_DOMAINS,
        }

    def features(self, i: int) -> FeatureVector:
        onehot = np.zeros(N_DOMAINS)
        onehot[int(self.intent_domain[i])] = 1.0
        return FeatureVector(
            audio=self.audio[i].copy(),
            hypothesis=self.hypothesis[i].copy(),
            pause_duration=float(self.pause_duration[i]),
            wakeword_duration=float(self.wakeword_duration[i]),
            pitch=self.pitch[i].copy(),
            intent_domain=onehot,
        )

    def decode(self, i: int, chosen) -> EndpointOutcome:
        if Action(chosen) == Action.STANDARD:
            return EndpointOutcome(int(self.standard_latency[i]), bool(self.standard_cutoff[i]))
        self.require_relaxed()
        return EndpointOutcome(int(self.relaxed_latency[i]), bool(self.relaxed_cutoff[i]))

    def decode_many(self, actions) -> tuple:
        """Vectorized decode: ``(latency, cutoff)`` arrays for per-row actions."""
        actions = np.asarray(actions)
        if actions.shape != (len(self),):
            raise ValidationError(f"expected {len(self)} actions, got shape {actions.shape}")
        relaxed = actions == Action.RELAXED
        if relaxed.any():
            self.require_relaxed()
            latency = np.where(relaxed, self.relaxed_latency, self.standard_latency)
            cutoff = np.where(relaxed, self.relaxed_cutoff, self.standard_cutoff)
        else:
            latency = self.standard_latency.copy()
            cutoff = self.standard_cutoff.copy()
        return latency, cutoff.astype(bool)

    def require_relaxed(self) -> None:
        if not self.has_relaxed:
            raise CorpusError("corpus is standard-only observational: relaxed outcomes are unavailable")

    def subset(self, index) -> "Corpus":
        index = np.asarray(index)
        pick = lambda a: None if a is None else a[index]
        return Corpus(
            ids=self.ids[index],
            latent_slowness=self.latent_slowness[index],
            audio=self.audio[index],
            hypothesis=self.hypothesis[index],
            pause_duration=self.pause_duration[index],
            wakeword_duration=self.wakeword_duration[index],
            pitch=self.pitch[index],
            intent_domain=self.intent_domain[index],
            standard_latency=self.standard_latency[index],
            standard_cutoff=self.standard_cutoff[index],
            relaxed_latency=pick(self.relaxed_latency),
            relaxed_cutoff=pick(self.relaxed_cutoff),
            labels=self.labels[index],
        )

    def validate(self) -> None:
        """Check labeling and cutoff-dominance invariants over every row."""
        bad = np.flatnonzero(self.labels != self.standard_cutoff.astype(self.labels.dtype))
        if bad.size:
            raise CorpusError(f"label disagrees with standard cutoff for utterance {int(self.ids[bad[0]])}")
        if self.has_relaxed:
            bad = np.flatnonzero(self.relaxed_cutoff & ~self.standard_cutoff)
            if bad.size:
                raise CorpusError(
                    f"utterance {int(self.ids[bad[0]])} is cut off by relaxed but not by standard"
                )

    @property
    def positive_rate(self) -> float:
        return float(np.mean(self.labels)) if len(self) else 0.0

    @property
    def dual_cutoff_rate(self) -> float:
        self.require_relaxed()
        return float(np.mean(self.relaxed_cutoff & self.standard_cutoff)) if len(self) else 0.0

    @classmethod
    def concatenate(cls, parts) -> "Corpus":
        parts = list(parts)
        if not parts:
            raise ValidationError("nothing to concatenate")
        cat = lambda name: (
            None if getattr(parts[0], name) is None
            else np.concatenate([getattr(p, name) for p in parts])
        )
        return cls(**{name: cat(name) for name in _CORPUS_FIELDS})


_CORPUS_FIELDS = (
    "ids", "latent_slowness", "audio", "hypothesis", "pause_duration", "wakeword_duration",
    "pitch", "intent_domain", "standard_latency", "standard_cutoff", "relaxed_latency",
    "relaxed_cutoff", "labels",
)


def derive_labels(standard_cutoff) -> np.ndarray:
    """Class 1 (relaxed is optimal) iff the standard configuration cut off early."""
    return np.asarray(standard_cutoff, dtype=bool).astype(np.int8)


def empty_corpus(config: GeneratorConfig) -> Corpus:
    dims = config.feature_dims
    return Corpus(
        ids=np.zeros(0, dtype=np.int64),
        latent_slowness=np.zeros(0),
        audio=np.zeros((0, dims["audio"])),
        hypothesis=np.zeros((0, dims["hypothesis"])),
        pause_duration=np.zeros(0),
        wakeword_duration=np.zeros(0),
        pitch=np.zeros((0, dims["pitch"])),
        intent_domain=np.zeros(0, dtype=np.int64),
        standard_latency=np.zeros(0, dtype=np.int64),
        standard_cutoff=np.zeros(0, dtype=bool),
        relaxed_latency=np.zeros(0, dtype=np.int64),
        relaxed_cutoff=np.zeros(0, dtype=bool),
    )


def _mix(signal, weight, noise):
    return weight * signal + np.sqrt(1.0 - weight * weight) * noise


def _generate_chunk(config: GeneratorConfig, start: int, size: int, seed_seq, intercept: float) -> Corpus:
    rng = np.random.default_rng(seed_seq)
    info = config.informativeness
    s = rng.standard_normal(size)

    cut_std = rng.random(size) < expit(config.cutoff_slope * s + intercept)
    rescue_fail = config.target_dual_cutoff_rate / config.target_standard_cutoff_rate
    cut_rel = cut_std & (rng.random(size) < rescue_fail)

    log_median = np.log(config.base_latency_median_ms)
    lat_std = np.rint(np.exp(log_median + config.base_latency_sigma * rng.standard_normal(size)))
    scale = config.relaxed_penalty_mean_ms - config.relaxed_penalty_shift_ms
    penalty = config.relaxed_penalty_shift_ms + rng.exponential(scale, size) if scale > 0 else \
        np.full(size, config.relaxed_penalty_shift_ms)
    # strictly positive so relaxed always waits longer than standard
    lat_rel = lat_std + np.maximum(np.rint(penalty), 1.0)

    col = s[:, None]
    audio = _mix(col, info["audio"], rng.standard_normal((size, config.audio_dim)))
    hyp = _mix(col, info["hypothesis"], rng.standard_normal((size, config.hypothesis_dim)))
    pitch = _mix(col, info["pitch"], rng.standard_normal((size, config.pitch_dim)))
    pause = config.pause_median_ms * np.exp(
        config.pause_log_sigma * _mix(s, info["pause_duration"], rng.standard_normal(size)))
    wake = config.wakeword_median_ms * np.exp(
        config.wakeword_log_sigma * _mix(s, info["wakeword_duration"], rng.standard_normal(size)))
    domain_score = _mix(s, info["intent_domain"], rng.standard_normal(size))
    domain = np.searchsorted(_DOMAIN_EDGES, domain_score).astype(np.int64)

    return Corpus(
        ids=np.arange(start, start + size, dtype=np.int64),
        latent_slowness=s,
        audio=audio,
        hypothesis=hyp,
        pause_duration=pause,
        wakeword_duration=wake,
        pitch=pitch,
        intent_domain=domain,
        standard_latency=lat_std.astype(np.int64),
        standard_cutoff=cut_std,
        relaxed_latency=lat_rel.astype(np.int64),
        relaxed_cutoff=cut_rel,
    )


def generate_chunks(config: GeneratorConfig) -> Iterator[Corpus]:
    """Generate the corpus in fixed-size chunks.

    Chunk ``k`` draws from its own child seed, so any prefix of the corpus
    is independent of ``n_utterances`` and chunks can be produced in
    parallel.
    """
    config.validate()
    intercept = cutoff_intercept(config.cutoff_slope, config.target_standard_cutoff_rate)
    root = np.random.SeedSequence(config.seed)
    n_chunks = -(-config.n_utterances // _CHUNK)
    for k, child in enumerate(root.spawn(n_chunks)):
        start = k * _CHUNK
        size = min(_CHUNK, config.n_utterances - start)
        yield _generate_chunk(config, start, size, child, intercept)


def generate(config: GeneratorConfig) -> Corpus:
    """Materialize a whole synthetic corpus; iterate it for utterances."""
    chunks = list(generate_chunks(config))
    if not chunks:
        return empty_corpus(config)
    corpus = Corpus.concatenate(chunks)
    corpus.validate()
    return corpus


def iter_utterances(config: GeneratorConfig) -> Iterator[Utterance]:
    for chunk in generate_chunks(config):
        yield from chunk


# ---------------------------------------------------------------------------
# observation model


@dataclass(frozen=True)
class ObservationSpec:
    """What an agent gets to see of an utterance.

    ``fraction_known`` applies the same visible fraction to every utterance;
    ``first_segment`` draws a per-utterance fraction around
    ``segment_mean`` percent, mimicking a wake-word-aligned first segment.
    """

    visible_fraction: float = 100.0
    enabled_groups: tuple = GROUPS
    mode: str = "fraction_known"
    seed: int = 0
    segment_mean: float = 30.0
    segment_sd: float = 8.0
    segment_min: float = 5.0
    segment_max: float = 100.0

    def __post_init__(self):
        object.__setattr__(self, "enabled_groups", tuple(self.enabled_groups))
        if not 0 < self.visible_fraction <= 100:
            raise ValidationError(f"visible_fraction must lie in (0, 100], got {self.visible_fraction}")
        if self.mode not in ("fraction_known", "first_segment"):
            raise ValidationError(f"unknown observation mode {self.mode!r}")
        unknown = set(self.enabled_groups) - set(GROUPS)
        if unknown:
            raise ValidationError(f"unknown feature groups {sorted(unknown)}")
        if not 0 < self.segment_min <= self.segment_max <= 100:
            raise ValidationError("segment bounds must satisfy 0 < min <= max <= 100")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["enabled_groups"] = list(self.enabled_groups)
        return d

    def with_groups(self, *groups) -> "ObservationSpec":
        return replace(self, enabled_groups=tuple(groups))


_M64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix(x):
    x = x + np.uint64(0x9E3779B97F4A7C15)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def _keyed_uniform(seed: int, ids, stream: int, width: int) -> np.ndarray:
    """Uniforms in (0, 1) that depend only on (seed, utterance id, stream, column)."""
    with np.errstate(over="ignore"):
        ids = np.asarray(ids, dtype=np.int64).astype(np.uint64).reshape(-1, 1)
        cols = np.arange(width, dtype=np.uint64).reshape(1, -1)
        key = _splitmix(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) ^ _splitmix(np.uint64(stream)))
        x = _splitmix(_splitmix(key ^ ids) + cols)
    return ((x >> np.uint64(11)).astype(np.float64) + 0.5) / 2.0 ** 53


def _keyed_normal(seed: int, ids, stream: int, width: int) -> np.ndarray:
    u1 = _keyed_uniform(seed, ids, 2 * stream, width)
    u2 = _keyed_uniform(seed, ids, 2 * stream + 1, width)
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def information_ratio(visible_fraction) -> np.ndarray:
    """Signal retained by a time-dependent group after hearing X percent."""
    return np.sqrt(np.asarray(visible_fraction, dtype=np.float64) / 100.0)


def visible_fractions(ids, spec: ObservationSpec) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    if spec.mode == "fraction_known":
        return np.full(ids.shape, float(spec.visible_fraction))
    draw = spec.segment_mean + spec.segment_sd * _keyed_normal(spec.seed, ids, 0, 1)[:, 0]
    return np.clip(draw, spec.segment_min, spec.segment_max)


def _degrade(values: np.ndarray, ids, spec: ObservationSpec, stream: int) -> np.ndarray:
    rho = information_ratio(visible_fractions(ids, spec))[:, None]
    if np.all(rho == 1.0):
        return values
    noise = _keyed_normal(spec.seed, ids, stream, values.shape[1])
    return rho * values + np.sqrt(1.0 - rho * rho) * noise


def observe(utterance: Utterance, spec: ObservationSpec) -> FeatureVector:
    """Features an agent sees for ``utterance`` under ``spec``."""
    f = utterance.features
    ids = np.array([utterance.id])
    on = set(spec.enabled_groups)
    audio = _degrade(f.audio[None, :], ids, spec, 1)[0] if "audio" in on else np.zeros_like(f.audio)
    hyp = (_degrade(f.hypothesis[None, :], ids, spec, 2)[0] if "hypothesis" in on
           else np.zeros_like(f.hypothesis))
    return FeatureVector(
        audio=np.array(audio, dtype=np.float64),
        hypothesis=np.array(hyp, dtype=np.float64),
        pause_duration=f.pause_duration if "pause_duration" in on else 0.0,
        wakeword_duration=f.wakeword_duration if "wakeword_duration" in on else 0.0,
        pitch=f.pitch.copy() if "pitch" in on else np.zeros_like(f.pitch),
        intent_domain=f.intent_domain.copy() if "intent_domain" in on else np.zeros(N_DOMAINS),
    )


def feature_slices(dims: dict) -> dict:
    """Column range of each group inside the flattened feature matrix."""
    out, start = {}, 0
    for name in GROUPS:
        out[name] = slice(start, start + dims[name])
        start += dims[name]
    return out


def observe_matrix(corpus: Corpus, spec: ObservationSpec) -> np.ndarray:
    """Row ``i`` equals ``observe(corpus[i], spec).flatten()``."""
    dims = corpus.feature_dims
    slices = feature_slices(dims)
    n = len(corpus)
    out = np.zeros((n, slices["intent_domain"].stop))
    on = set(spec.enabled_groups)
    if "audio" in on:
        out[:, slices["audio"]] = _degrade(corpus.audio, corpus.ids, spec, 1)
    if "hypothesis" in on:
        out[:, slices["hypothesis"]] = _degrade(corpus.hypothesis, corpus.ids, spec, 2)
    if "pause_duration" in on:
        out[:, slices["pause_duration"].start] = corpus.pause_duration / 1000.0
    if "wakeword_duration" in on:
        out[:, slices["wakeword_duration"].start] = corpus.wakeword_duration / 1000.0
    if "pitch" in on:
        out[:, slices["pitch"]] = corpus.pitch
    if "intent_domain" in on and n:
        out[np.arange(n), slices["intent_domain"].start + corpus.intent_domain] = 1.0
    return out


def feature_dim(dims: dict) -> int:
    return sum(dims[g] for g in GROUPS)
