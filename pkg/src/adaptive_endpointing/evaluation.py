"""Endpointing metrics, policy evaluation and trade-off sweeps.

Percentiles use linear interpolation between order statistics (numpy's
default "linear" method), but the rank ``q * (n - 1) / 100`` is computed
with integer arithmetic so that boundary values are classified exactly.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Callable, Optional, Sequence

import numpy as np

from .environment import Action, Corpus, EndpointOutcome, ObservationSpec, observe_matrix
from .errors import InsufficientSampleError, ValidationError

NA = "NA"

REPORT_COLUMNS = (
    "label", "knob", "n", "accuracy", "precision", "recall", "f1",
    "early_ep_rate", "tm95", "dtm95_99", "mean_latency", "relaxed_fraction",
    "early_ep_rate_change", "tm95_change", "dtm95_99_change",
)


def _sorted_latencies(latencies) -> np.ndarray:
    x = np.asarray(latencies, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ValidationError("latency list is empty")
    if not np.all(np.isfinite(x)):
        raise ValidationError("latencies must be finite")
    return np.sort(x)


def _rank(n: int, q) -> tuple:
    """Integer part and fractional remainder of the type-7 rank."""
    pos = Fraction(q) * (n - 1) / 100
    k = math.floor(pos)
    return k, pos - k


def percentile(values, q) -> float:
    x = _sorted_latencies(values)
    if not 0 <= q <= 100:
        raise ValidationError("q must lie in [0, 100]")
    k, frac = _rank(len(x), q)
    if frac == 0:
        return float(x[k])
    return float(x[k] + (x[k + 1] - x[k]) * float(frac))


def _at_order_statistic(x: np.ndarray, k: int, frac) -> bool:
    """Whether the interpolated percentile coincides with ``x[k]``."""
    return frac == 0 or x[k + 1] == x[k]


def tm95(latencies) -> float:
    """Mean of all latencies at or below the 95th percentile."""
    x = _sorted_latencies(latencies)
    k, _ = _rank(len(x), 95)
    # the percentile lies in [x[k], x[k+1]) unless it equals a tie with x[k]
    stop = int(np.searchsorted(x, x[k], side="right"))
    return float(np.mean(x[:stop]))


def dtm95_99(latencies) -> float:
    """Mean of latencies in the closed band [P95, P99]."""
    x = _sorted_latencies(latencies)
    k, frac = _rank(len(x), 95)
    m, _ = _rank(len(x), 99)
    start = int(np.searchsorted(x, x[k], side="left")) if _at_order_statistic(x, k, frac) else k + 1
    stop = int(np.searchsorted(x, x[m], side="right"))
    if stop <= start:
        raise InsufficientSampleError(
            f"no latencies between the 95th and 99th percentiles (n={len(x)}); use n >= 100"
        )
    return float(np.mean(x[start:stop]))


def _cutoff_array(outcomes) -> np.ndarray:
    if isinstance(outcomes, np.ndarray):
        return outcomes.astype(bool).reshape(-1)
    outcomes = list(outcomes)
    if outcomes and isinstance(outcomes[0], EndpointOutcome):
        return np.array([o.cutoff for o in outcomes], dtype=bool)
    return np.asarray(outcomes, dtype=bool).reshape(-1)


def early_ep_rate(outcomes) -> float:
    """Percent of utterances cut off early; accepts outcomes or cutoff flags."""
    cut = _cutoff_array(outcomes)
    if cut.size == 0:
        raise ValidationError("no outcomes to rate")
    return 100.0 * float(np.count_nonzero(cut)) / cut.size


def classifier_metrics(predictions, labels) -> dict:
    """Accuracy/precision/recall/F1 in percent; Relaxed is the positive class.

    Undefined ratios are ``None`` rather than 0.
    """
    pred = np.asarray(predictions).astype(np.int64).reshape(-1)
    lab = np.asarray(labels).astype(np.int64).reshape(-1)
    if pred.shape != lab.shape:
        raise ValidationError(f"{pred.size} predictions vs {lab.size} labels")
    if pred.size == 0:
        raise ValidationError("no predictions to score")
    tp = int(np.count_nonzero((pred == 1) & (lab == 1)))
    fp = int(np.count_nonzero((pred == 1) & (lab == 0)))
    fn = int(np.count_nonzero((pred == 0) & (lab == 1)))
    accuracy = 100.0 * float(np.count_nonzero(pred == lab)) / pred.size
    precision = 100.0 * tp / (tp + fp) if tp + fp else None
    recall = 100.0 * tp / (tp + fn) if tp + fn else None
    if precision is None or recall is None:
        f1 = None
    elif precision + recall == 0:
        f1 = 0.0
    else:
        f1 = 2.0 * precision * recall / (precision + recall)
    return {"accuracy": accuracy, "precision": precision, "recall": recall, "f1": f1}


def _relative(value: float, base: float) -> Optional[float]:
    if base == 0:
        return 0.0 if value == 0 else None
    return 100.0 * (value - base) / base


@dataclass
class MetricsReport:
    label: str
    n: int
    early_ep_rate: float
    tm95: float
    dtm95_99: Optional[float]
    mean_latency: float
    relaxed_fraction: float
    accuracy: float
    precision: Optional[float]
    recall: Optional[float]
    f1: Optional[float]
    knob: Optional[float] = None
    relative_to_baseline: Optional[dict] = None

    def with_baseline(self, baseline: "MetricsReport") -> "MetricsReport":
        rel = {
            "early_ep_rate_change": _relative(self.early_ep_rate, baseline.early_ep_rate),
            "tm95_change": _relative(self.tm95, baseline.tm95),
            "dtm95_99_change": (
                None if self.dtm95_99 is None or baseline.dtm95_99 is None
                else _relative(self.dtm95_99, baseline.dtm95_99)
            ),
        }
        return MetricsReport(**{**asdict(self), "relative_to_baseline": rel})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**d)

    def row(self) -> dict:
        rel = self.relative_to_baseline or {}
        d = asdict(self)
        d.pop("relative_to_baseline")
        d.update({k: rel.get(k) for k in ("early_ep_rate_change", "tm95_change", "dtm95_99_change")})
        return {k: d[k] for k in REPORT_COLUMNS}


def evaluate_actions(actions, corpus: Corpus, label: str = "policy", *, knob=None,
                     include_cutoff_latency: bool = True) -> MetricsReport:
    """Metrics for per-utterance actions on ``corpus`` (decode is a lookup)."""
    actions = np.asarray(actions, dtype=np.int64)
    latency, cutoff = corpus.decode_many(actions)
    lat = latency if include_cutoff_latency else latency[~cutoff]
    try:
        band = dtm95_99(lat)
    except InsufficientSampleError:
        band = None
    cls = classifier_metrics(actions, corpus.labels)
    return MetricsReport(
        label=label,
        n=len(corpus),
        early_ep_rate=early_ep_rate(cutoff),
        tm95=tm95(lat),
        dtm95_99=band,
        mean_latency=float(np.mean(lat)),
        relaxed_fraction=float(np.mean(actions == Action.RELAXED)),
        knob=None if knob is None else float(knob),
        **cls,
    )


def evaluate_policy(policy, corpus: Corpus, observation: Optional[ObservationSpec] = None, *,
                    label: Optional[str] = None, relative: bool = False, features=None,
                    include_cutoff_latency: bool = True, knob=None) -> MetricsReport:
    """Run ``policy`` on the observed features of every utterance and score it.

    With ``relative=True`` the report carries percent changes against
    Standard Only on the same corpus.
    """
    if len(corpus) == 0:
        raise ValidationError("cannot evaluate on an empty corpus")
    observation = observation or ObservationSpec()
    if features is None:
        features = observe_matrix(corpus, observation)
    actions = policy.decide(corpus, features)
    name = label or getattr(policy, "kind", type(policy).__name__)
    report = evaluate_actions(actions, corpus, name, knob=knob,
                              include_cutoff_latency=include_cutoff_latency)
    if relative:
        base = evaluate_actions(np.zeros(len(corpus), dtype=np.int64), corpus, "standard_only",
                                include_cutoff_latency=include_cutoff_latency)
        report = report.with_baseline(base)
    return report


@dataclass
class TradeoffCurve:
    knob_name: str
    knobs: list
    points: list = field(default_factory=list)

    def __post_init__(self):
        k = np.asarray(self.knobs, dtype=np.float64)
        if k.size >= 2:
            d = np.diff(k)
            if not (np.all(d > 0) or np.all(d < 0)):
                raise ValidationError("knob values must be strictly monotone along a curve")

    def feasible(self, min_reduction: float, max_tm95_increase: float) -> list:
        """Points reducing early EP by >= ``min_reduction`` percent with TM95
        increase <= ``max_tm95_increase`` percent (relative to baseline)."""
        out = []
        for p in self.points:
            rel = p.relative_to_baseline or {}
            ep, tm = rel.get("early_ep_rate_change"), rel.get("tm95_change")
            if ep is not None and tm is not None and -ep >= min_reduction and tm <= max_tm95_increase:
                out.append(p)
        return out

    def to_dict(self) -> dict:
        return {"knob_name": self.knob_name, "knobs": list(map(float, self.knobs)),
                "points": [p.to_dict() for p in self.points]}

    @classmethod
    def from_dict(cls, d: dict) -> "TradeoffCurve":
        return cls(d["knob_name"], d["knobs"], [MetricsReport.from_dict(p) for p in d["points"]])


def sweep_tradeoff(family: Callable, knobs: Sequence[float], corpus: Corpus,
                   observation: Optional[ObservationSpec] = None, *, knob_name: str = "threshold",
                   label: str = "sweep", include_cutoff_latency: bool = True) -> TradeoffCurve:
    """Evaluate ``family(knob)`` at every knob value.

    ``family`` maps a knob value to a policy: a classifier at threshold tau,
    or a freshly trained bandit for a reward-weight ratio.
    """
    knobs = [float(k) for k in knobs]
    if len(knobs) < 2:
        raise ValidationError("a trade-off sweep needs at least two knob values")
    curve = TradeoffCurve(knob_name, knobs)
    observation = observation or ObservationSpec()
    features = observe_matrix(corpus, observation)
    base = evaluate_actions(np.zeros(len(corpus), dtype=np.int64), corpus, "standard_only",
                            include_cutoff_latency=include_cutoff_latency)
    for k in knobs:
        policy = family(k)
        rep = evaluate_actions(policy.decide(corpus, features), corpus, label, knob=k,
                               include_cutoff_latency=include_cutoff_latency)
        curve.points.append(rep.with_baseline(base))
    return curve


def _fmt(v):
    if v is None:
        return NA
    if isinstance(v, float):
        return repr(v)
    return str(v)


def reports_to_csv(reports: Sequence[MetricsReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for r in reports:
        row = r.row()
        writer.writerow([_fmt(row[c]) for c in REPORT_COLUMNS])
    return buf.getvalue()


def reports_to_json(reports: Sequence[MetricsReport]) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True)
