"""Decision agents: static baselines, the oracle, a supervised classifier
and the online deep contextual bandit.

Every policy exposes ``decide(corpus, features) -> actions`` so the
evaluation harness can treat them uniformly. Only the oracle reads the
corpus; the others look at the observed feature matrix alone.

The bandit's online interface is deliberately narrow: :meth:`BanditAgent.step`
takes a feature row, :meth:`BanditAgent.learn` takes the same row, the
chosen action and the realized reward. Nothing else about the utterance
can reach it.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import nn_core
from .environment import N_ACTIONS, Action, Corpus, RewardSpec
from .errors import TrainingError, ValidationError

EXPLORATION_KINDS = ("concrete_dropout", "epsilon_greedy", "greedy")

__all__ = [
    "Action",
    "RewardSpec",
    "choose_action",
    "BanditConfig",
    "BanditAgent",
    "SupervisedHyperparams",
    "SupervisedClassifier",
    "supervised_train",
    "StaticPolicy",
    "OraclePolicy",
    "static_policy",
    "oracle_policy",
]


def choose_action(predicted_rewards) -> Action:
    """Greedy action; ties go to :attr:`Action.STANDARD`."""
    r = np.asarray(predicted_rewards, dtype=np.float64).reshape(-1)
    if r.shape != (N_ACTIONS,):
        raise ValidationError(f"expected {N_ACTIONS} predicted rewards, got {r.shape}")
    if not np.all(np.isfinite(r)):
        raise ValidationError("predicted rewards must be finite")
    return Action(int(np.argmax(r)))


def greedy_actions(predicted: np.ndarray) -> np.ndarray:
    # argmax returns the first maximum, which is the Standard tie-break
    return np.argmax(predicted, axis=1).astype(np.int64)


# ---------------------------------------------------------------------------
# baselines


@dataclass(frozen=True)
class StaticPolicy:
    kind: str = "standard_only"

    def __post_init__(self):
        if self.kind not in ("standard_only", "relaxed_only"):
            raise ValidationError(f"unknown static policy {self.kind!r}")

    @property
    def action(self) -> Action:
        return Action.STANDARD if self.kind == "standard_only" else Action.RELAXED

    def __call__(self, utterance=None) -> Action:
        return self.action

    def decide(self, corpus: Corpus, features: np.ndarray) -> np.ndarray:
        return np.full(len(corpus), int(self.action), dtype=np.int64)


def static_policy(kind: str) -> StaticPolicy:
    return StaticPolicy(kind)


@dataclass(frozen=True)
class OraclePolicy:
    """Hindsight-optimal choice: relaxed exactly for Class 1 utterances."""

    kind: str = "oracle"

    def __call__(self, utterance) -> Action:
        return Action.RELAXED if utterance.label == 1 else Action.STANDARD

    def decide(self, corpus: Corpus, features: np.ndarray) -> np.ndarray:
        corpus.require_relaxed()
        return np.where(corpus.labels == 1, int(Action.RELAXED), int(Action.STANDARD)).astype(np.int64)


def oracle_policy(utterance) -> Action:
    return OraclePolicy()(utterance)


# ---------------------------------------------------------------------------
# deep contextual bandit


@dataclass
class BanditConfig:
    exploration: str = "concrete_dropout"
    epsilon: float = 0.1
    batch_size: int = 64
    warmup: int = 500
    learning_rate: float = 0.02
    hidden: tuple = (64, 64)
    initial_dropout: float = 0.1
    temperature: float = 0.1
    l2_scale: float = 1e-6
    dropout_reg_scale: float = 1e-5
    reward: RewardSpec = field(default_factory=RewardSpec)

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if isinstance(self.reward, dict):
            self.reward = RewardSpec(**self.reward)
        if self.exploration not in EXPLORATION_KINDS:
            raise ValidationError(f"exploration must be one of {EXPLORATION_KINDS}")
        if not 0 <= self.epsilon <= 1:
            raise ValidationError("epsilon must lie in [0, 1]")
        if self.batch_size < 1 or self.warmup < 0:
            raise ValidationError("batch_size must be >= 1 and warmup >= 0")
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class StepRecord:
    action: Action
    predicted: np.ndarray
    explored: bool


class BanditAgent:
    """Deep CMAB with a two-headed reward predictor.

    Each decision runs the network once (with fresh concrete-dropout masks
    under the default exploration) and picks the greedy head. Examples are
    buffered and one SGD step on the masked squared error is taken every
    time the buffer reaches ``batch_size``.
    """

    def __init__(self, n_features: int, config: Optional[BanditConfig] = None, seed: int = 0,
                 network: Optional[nn_core.NetworkParameters] = None):
        self.config = config or BanditConfig()
        self.seed = int(seed)
        self.rng = np.random.default_rng(self.seed)
        if network is None:
            network = nn_core.init_network(
                n_features, N_ACTIONS, self.config.hidden,
                rng=np.random.default_rng([self.seed, 1]),
                initial_dropout=self.config.initial_dropout,
                l2_scale=self.config.l2_scale,
                dropout_reg_scale=self.config.dropout_reg_scale,
                temperature=self.config.temperature,
            )
            network.seed = self.seed
        if network.n_outputs != N_ACTIONS or network.n_inputs != n_features:
            raise ValidationError("network shape does not match the bandit problem")
        self.network = network
        self.step_counter = 0
        self.n_updates = 0
        self._buf_x = []
        self._buf_a = []
        self._buf_r = []

    @property
    def buffer_size(self) -> int:
        return len(self._buf_a)

    def predict(self, features, mode: str = "deterministic") -> np.ndarray:
        out, _ = nn_core.forward(self.network, features, mode, rng=self.rng)
        return out

    def step(self, features) -> StepRecord:
        x = np.asarray(features, dtype=np.float64).reshape(1, -1)
        cfg = self.config
        mode = "sampled" if cfg.exploration == "concrete_dropout" else "deterministic"
        pred, _ = nn_core.forward(self.network, x, mode, rng=self.rng)
        pred = pred[0]
        self.step_counter += 1
        if self.step_counter <= cfg.warmup:
            return StepRecord(Action(int(self.rng.integers(N_ACTIONS))), pred, True)
        if cfg.exploration == "epsilon_greedy" and self.rng.random() < cfg.epsilon:
            return StepRecord(Action(int(self.rng.integers(N_ACTIONS))), pred, True)
        return StepRecord(choose_action(pred), pred, False)

    def learn(self, features, chosen, realized_reward: float) -> bool:
        """Buffer one example; returns True when it triggered an update."""
        r = float(realized_reward)
        if not np.isfinite(r):
            raise ValidationError("realized reward must be finite")
        self._buf_x.append(np.asarray(features, dtype=np.float64).reshape(-1))
        self._buf_a.append(int(Action(chosen)))
        self._buf_r.append(r)
        if len(self._buf_a) < self.config.batch_size:
            return False
        x = np.vstack(self._buf_x)
        a = np.asarray(self._buf_a)
        rewards = np.asarray(self._buf_r)
        self._buf_x, self._buf_a, self._buf_r = [], [], []
        self.network = self._update(x, a, rewards)
        self.n_updates += 1
        return True

    def _update(self, x, a, rewards) -> nn_core.NetworkParameters:
        mode = "sampled" if self.config.exploration == "concrete_dropout" else "deterministic"
        pred, tape = nn_core.forward(self.network, x, mode, rng=self.rng)
        rows = np.arange(len(a))
        grad = np.zeros_like(pred)
        # only the chosen head has an observed reward
        grad[rows, a] = 2.0 * (pred[rows, a] - rewards) / len(a)
        grads = nn_core.backward(self.network, tape, x, grad)
        try:
            return nn_core.sgd_step(self.network, grads, self.config.learning_rate,
                                    train_dropout=mode == "sampled")
        except TrainingError as exc:
            raise TrainingError(f"bandit update {self.n_updates + 1} failed: {exc}") from exc

    def decide(self, corpus: Corpus, features: np.ndarray) -> np.ndarray:
        """Frozen greedy decisions (no dropout, no exploration)."""
        if len(features) == 0:
            return np.zeros(0, dtype=np.int64)
        return greedy_actions(self.predict(features))

    def checkpoint(self) -> dict:
        return {
            "agent": "bandit",
            "config": self.config.to_dict(),
            "seed": self.seed,
            "step_counter": self.step_counter,
            "n_updates": self.n_updates,
            "network": nn_core.to_dict(self.network),
        }

    @classmethod
    def from_checkpoint(cls, payload: dict) -> "BanditAgent":
        cfg = dict(payload["config"])
        cfg["reward"] = RewardSpec(**cfg["reward"])
        net = nn_core.from_dict(payload["network"])
        agent = cls(net.n_inputs, BanditConfig(**cfg), payload["seed"], network=net)
        agent.step_counter = payload["step_counter"]
        agent.n_updates = payload["n_updates"]
        return agent


# ---------------------------------------------------------------------------
# supervised classifier


@dataclass
class SupervisedHyperparams:
    hidden: tuple = (64, 64)
    epochs: int = 8
    batch_size: int = 64
    learning_rate: float = 0.01
    class_weighting: str = "inverse_frequency"
    l2_scale: float = 1e-6
    use_dropout: bool = False
    initial_dropout: float = 0.1
    temperature: float = 0.1
    dropout_reg_scale: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.class_weighting not in ("inverse_frequency", "none"):
            raise ValidationError("class_weighting must be 'inverse_frequency' or 'none'")
        if self.epochs < 1 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ValidationError("epochs, batch_size and learning_rate must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class SupervisedClassifier:
    """Single-logit classifier; predicts Relaxed iff sigmoid(logit) >= threshold."""

    network: nn_core.NetworkParameters
    threshold: Optional[float] = None
    hyperparams: Optional[SupervisedHyperparams] = None

    def probabilities(self, features) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)
        if len(features) == 0:
            return np.zeros(0)
        out, _ = nn_core.forward(self.network, features, "deterministic")
        return nn_core.sigmoid(out[:, 0])

    def with_threshold(self, threshold: float) -> "SupervisedClassifier":
        return SupervisedClassifier(self.network, float(threshold), self.hyperparams)

    def predict(self, features, threshold: Optional[float] = None) -> np.ndarray:
        tau = self.threshold if threshold is None else threshold
        if tau is None:
            raise ValidationError("decision threshold is unset; sweep it first")
        return (self.probabilities(features) >= tau).astype(np.int64)

    def decide(self, corpus: Corpus, features: np.ndarray) -> np.ndarray:
        return self.predict(features)

    def checkpoint(self) -> dict:
        return {
            "agent": "supervised",
            "threshold": self.threshold,
            "hyperparams": None if self.hyperparams is None else self.hyperparams.to_dict(),
            "network": nn_core.to_dict(self.network),
        }

    @classmethod
    def from_checkpoint(cls, payload: dict) -> "SupervisedClassifier":
        hp = payload.get("hyperparams")
        return cls(nn_core.from_dict(payload["network"]), payload.get("threshold"),
                   None if hp is None else SupervisedHyperparams(**hp))


def supervised_train(features, labels, hyperparams: Optional[SupervisedHyperparams] = None,
                     ) -> SupervisedClassifier:
    """Fit the classifier with class-weighted binary cross-entropy and SGD."""
    hp = hyperparams or SupervisedHyperparams()
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels).astype(np.float64).reshape(-1)
    if x.ndim != 2 or len(x) != len(y):
        raise ValidationError("features must be n x d with one label per row")
    if not np.all((y == 0) | (y == 1)):
        raise ValidationError("labels must be 0/1")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == len(y):
        raise TrainingError("supervised training needs both classes in the dataset")
    if hp.class_weighting == "inverse_frequency":
        w_pos, w_neg = len(y) / (2.0 * n_pos), len(y) / (2.0 * (len(y) - n_pos))
    else:
        w_pos = w_neg = 1.0
    weights = np.where(y == 1, w_pos, w_neg)

    rng = np.random.default_rng(hp.seed)
    net = nn_core.init_network(
        x.shape[1], 1, hp.hidden, rng=np.random.default_rng([hp.seed, 1]),
        initial_dropout=hp.initial_dropout, l2_scale=hp.l2_scale,
        dropout_reg_scale=hp.dropout_reg_scale, temperature=hp.temperature,
    )
    net.seed = hp.seed
    mode = "sampled" if hp.use_dropout else "deterministic"
    for epoch in range(hp.epochs):
        order = rng.permutation(len(y))
        for start in range(0, len(y), hp.batch_size):
            idx = order[start:start + hp.batch_size]
            xb = x[idx]
            logits, tape = nn_core.forward(net, xb, mode, rng=rng)
            # d/dlogit of weighted BCE, averaged over the batch
            g = weights[idx] * (nn_core.sigmoid(logits[:, 0]) - y[idx]) / len(idx)
            grads = nn_core.backward(net, tape, xb, g[:, None])
            try:
                net = nn_core.sgd_step(net, grads, hp.learning_rate, train_dropout=hp.use_dropout)
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}, batch at row {start}: {exc}") from exc
    return SupervisedClassifier(net, None, hp)


def threshold_grid(n: int = 201) -> np.ndarray:
    """Default tau grid; includes 0 (always relaxed) and a value above 1."""
    return np.concatenate([np.linspace(0.0, 1.0, n), [1.0 + 1e-9]])
