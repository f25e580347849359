"""Adaptive endpointing with a deep contextual bandit, on a synthetic world."""

__version__ = "0.1.0"

from .environment import (
    Action,
    Corpus,
    EndpointOutcome,
    FeatureVector,
    GeneratorConfig,
    ObservationSpec,
    RewardSpec,
    Utterance,
    decode,
    generate,
    observe,
    observe_matrix,
    reward,
)
from .evaluation import (
    MetricsReport,
    TradeoffCurve,
    classifier_metrics,
    dtm95_99,
    early_ep_rate,
    evaluate_policy,
    sweep_tradeoff,
    tm95,
)
from .policies import (
    BanditAgent,
    BanditConfig,
    SupervisedClassifier,
    SupervisedHyperparams,
    choose_action,
    oracle_policy,
    static_policy,
    supervised_train,
)
