"""Config-driven experiment runs, presets and Table-2 style reports.

A run is fully determined by its :class:`ExperimentConfig` (plus the code
version). Outputs go to one directory per run::

    config.json      normalized config snapshot
    corpus.json      split sizes, positive rates, source manifest hashes
    result.json      RunResult payload (everything except wall-clock)
    metrics.csv/json test-split reports (agent and baselines)
    curves.json/csv  trade-off curves, if any
    trace.csv        online learning trace (bandits)
    checkpoint.json  trained agent
    timing.json      wall-clock seconds
"""
from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .environment import (
    Corpus, GeneratorConfig, ObservationSpec, RewardSpec, generate, observe_matrix,
)
from .errors import ConfigError
from .evaluation import (
    MetricsReport, TradeoffCurve, evaluate_actions, reports_to_csv, reports_to_json, sweep_tradeoff,
)
from .ingestion import SPLITS, assign_splits, load_split, read_manifest, write_corpus
from .online import run_online
from .policies import (
    BanditAgent, BanditConfig, OraclePolicy, StaticPolicy, SupervisedHyperparams,
    supervised_train, threshold_grid,
)

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "ADAPTIVE_EP_OUTPUT_ROOT"
RESULT_FORMAT = "adaptive_endpointing.run"
BASELINE = "standard_only"


def _from_dict(cls, data: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class AgentSpec:
    """Tagged union over agent kinds; only the fields of ``kind`` matter.

    ``reward_ratios`` (bandits) lists beta/alpha values for a trade-off
    sweep, each point a fresh online run with the same seeds.
    """

    kind: str = "static"
    policy: str = "standard_only"
    supervised: SupervisedHyperparams = field(default_factory=SupervisedHyperparams)
    bandit: BanditConfig = field(default_factory=BanditConfig)
    tau_points: int = 201
    tau_selection: str = "max_f1"
    reward_ratios: Optional[list] = None

    KINDS = ("static", "oracle", "supervised", "bandit")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ConfigError(f"agent kind must be one of {self.KINDS}")
        if self.kind == "static" and self.policy not in ("standard_only", "relaxed_only"):
            raise ConfigError("static agents are 'standard_only' or 'relaxed_only'")
        if self.tau_selection != "max_f1":
            raise ConfigError("tau_selection supports only 'max_f1'")
        if self.reward_ratios is not None:
            self.reward_ratios = [float(r) for r in self.reward_ratios]
            if len(self.reward_ratios) < 2:
                raise ConfigError("reward_ratios needs at least two values")

    @property
    def label(self) -> str:
        return self.policy if self.kind == "static" else self.kind

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "static":
            d["policy"] = self.policy
        elif self.kind == "supervised":
            d.update(hyperparams=self.supervised.to_dict(), tau_points=self.tau_points,
                     tau_selection=self.tau_selection)
        elif self.kind == "bandit":
            d.update(config=self.bandit.to_dict(), reward_ratios=self.reward_ratios)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AgentSpec":
        d = dict(d)
        kind = d.pop("kind", "static")
        if kind == "static":
            return _from_dict(cls, {"kind": kind, **d}, "agent")
        if kind == "oracle":
            if d:
                raise ConfigError(f"agent: oracle takes no parameters, got {sorted(d)}")
            return cls(kind="oracle")
        if kind == "supervised":
            hp = _from_dict(SupervisedHyperparams, d.pop("hyperparams", {}), "agent.hyperparams")
            return _from_dict(cls, {"kind": kind, "supervised": hp, **d}, "agent")
        if kind == "bandit":
            cfg = dict(d.pop("config", {}))
            if "reward" in cfg:
                cfg["reward"] = _from_dict(RewardSpec, cfg["reward"], "agent.config.reward")
            bc = _from_dict(BanditConfig, cfg, "agent.config")
            return _from_dict(cls, {"kind": kind, "bandit": bc, **d}, "agent")
        raise ConfigError(f"agent kind must be one of {cls.KINDS}, got {kind!r}")


@dataclass
class ExperimentConfig:
    name: str = "run"
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    observation: ObservationSpec = field(default_factory=ObservationSpec)
    agent: AgentSpec = field(default_factory=AgentSpec)
    n_online_steps: Optional[int] = None
    eval_corpus: Optional[str] = None
    output_dir: Optional[str] = None
    corpus_seed: int = 0
    agent_seed: int = 0
    split_ratios: tuple = (0.8, 0.1, 0.1)
    include_cutoff_latency: bool = True
    trace_every: int = 1000

    def __post_init__(self):
        self.split_ratios = tuple(float(r) for r in self.split_ratios)
        # the corpus seed drives generation and observation noise
        self.generator.seed = self.corpus_seed
        if self.observation.seed != self.corpus_seed:
            self.observation = ObservationSpec(**{**self.observation.to_dict(), "seed": self.corpus_seed})

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "generator": self.generator.to_dict(),
            "observation": self.observation.to_dict(),
            "agent": self.agent.to_dict(),
            "n_online_steps": self.n_online_steps,
            "eval_corpus": self.eval_corpus,
            "output_dir": self.output_dir,
            "seeds": {"corpus": self.corpus_seed, "agent": self.agent_seed},
            "split_ratios": list(self.split_ratios),
            "include_cutoff_latency": self.include_cutoff_latency,
            "trace_every": self.trace_every,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = copy.deepcopy(d or {})
        known = {"name", "generator", "observation", "agent", "n_online_steps", "eval_corpus",
                 "output_dir", "seeds", "split_ratios", "include_cutoff_latency", "trace_every"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        seeds = d.pop("seeds", {}) or {}
        if set(seeds) - {"corpus", "agent"}:
            raise ConfigError("seeds accepts only 'corpus' and 'agent'")
        gen = dict(d.pop("generator", {}) or {})
        gen.pop("seed", None)
        obs = dict(d.pop("observation", {}) or {})
        obs.pop("seed", None)
        try:
            observation = ObservationSpec(**obs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"observation: {exc}") from exc
        return cls(
            generator=_from_dict(GeneratorConfig, gen, "generator"),
            observation=observation,
            agent=AgentSpec.from_dict(d.pop("agent", {}) or {}),
            corpus_seed=int(seeds.get("corpus", 0)),
            agent_seed=int(seeds.get("agent", 0)),
            **d,
        )

    def config_hash(self) -> str:
        payload = self.to_dict()
        payload.pop("output_dir")
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def load_config(path) -> ExperimentConfig:
    import yaml

    try:
        data = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML/JSON: {exc}") from exc
    return ExperimentConfig.from_dict(data or {})


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``dotted.key=value`` overrides (values parsed as YAML)."""
    import yaml

    data = copy.deepcopy(data)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        node = data
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-mapping")
        node[parts[-1]] = yaml.safe_load(raw)
    return data


# ---------------------------------------------------------------------------
# runs


@dataclass
class RunResult:
    name: str
    config_hash: str
    agent: str
    metrics: dict
    curves: dict
    trace: list
    corpus: dict
    selected_threshold: Optional[float] = None
    code_version: str = __version__
    wall_clock: Optional[float] = None

    def payload(self) -> dict:
        """Everything but wall-clock, in a stable order."""
        return {
            "format": RESULT_FORMAT,
            "name": self.name,
            "config_hash": self.config_hash,
            "code_version": self.code_version,
            "agent": self.agent,
            "selected_threshold": self.selected_threshold,
            "corpus": self.corpus,
            "metrics": {k: v.to_dict() for k, v in self.metrics.items()},
            "curves": {k: v.to_dict() for k, v in self.curves.items()},
            "trace": self.trace,
        }

    @classmethod
    def from_payload(cls, d: dict, wall_clock=None) -> "RunResult":
        if d.get("format") != RESULT_FORMAT:
            raise ConfigError("not a run result")
        return cls(
            name=d["name"],
            config_hash=d["config_hash"],
            agent=d["agent"],
            metrics={k: MetricsReport.from_dict(v) for k, v in d["metrics"].items()},
            curves={k: TradeoffCurve.from_dict(v) for k, v in d["curves"].items()},
            trace=d["trace"],
            corpus=d["corpus"],
            selected_threshold=d.get("selected_threshold"),
            code_version=d.get("code_version", __version__),
            wall_clock=wall_clock,
        )


def _load_splits(cfg: ExperimentConfig) -> tuple:
    if cfg.eval_corpus:
        manifest = read_manifest(cfg.eval_corpus)
        splits = {s: load_split(cfg.eval_corpus, s) for s in SPLITS}
        info = {
            "source": "file",
            "manifest_sha256": {s: manifest["splits"][s]["sha256"] for s in SPLITS},
        }
    else:
        corpus = generate(cfg.generator)
        which = assign_splits(len(corpus), cfg.split_ratios, cfg.corpus_seed)
        splits = {s: corpus.subset(np.flatnonzero(which == k)) for k, s in enumerate(SPLITS)}
        info = {"source": "generator"}
    info["counts"] = {s: len(c) for s, c in splits.items()}
    info["positive_rate"] = {s: round(c.positive_rate, 6) for s, c in splits.items()}
    return splits, info


def _baselines(test: Corpus, include_cut: bool) -> dict:
    n = len(test)
    out = {BASELINE: evaluate_actions(np.zeros(n, dtype=np.int64), test, BASELINE,
                                      include_cutoff_latency=include_cut)}
    if test.has_relaxed:
        out["relaxed_only"] = evaluate_actions(np.ones(n, dtype=np.int64), test, "relaxed_only",
                                               include_cutoff_latency=include_cut)
        out["oracle"] = evaluate_actions(OraclePolicy().decide(test, None), test, "oracle",
                                         include_cutoff_latency=include_cut)
    base = out[BASELINE]
    return {k: v.with_baseline(base) for k, v in out.items()}


def _train_bandit(cfg: ExperimentConfig, train: Corpus, x_train: np.ndarray, bandit_cfg: BanditConfig):
    agent = BanditAgent(x_train.shape[1], bandit_cfg, seed=cfg.agent_seed)
    steps = len(train) if cfg.n_online_steps is None else cfg.n_online_steps
    trace, _ = run_online(agent, train, x_train, steps, trace_every=cfg.trace_every)
    return agent, trace


def run_experiment(cfg: ExperimentConfig) -> tuple:
    """Execute one config; returns ``(RunResult, checkpoint_payload)``."""
    t0 = time.perf_counter()
    splits, corpus_info = _load_splits(cfg)
    train, dev, test = splits["train"], splits["dev"], splits["test"]
    if len(test) == 0:
        raise ConfigError("test split is empty")
    obs = cfg.observation
    inc = cfg.include_cutoff_latency
    metrics = _baselines(test, inc)
    base = metrics[BASELINE]
    curves = {}
    trace = []
    checkpoint = {"agent": cfg.agent.kind}
    selected = None
    spec = cfg.agent

    if spec.kind == "static":
        report = metrics[spec.policy]
    elif spec.kind == "oracle":
        report = metrics["oracle"]
    elif spec.kind == "supervised":
        x_train = observe_matrix(train, obs)
        hp = SupervisedHyperparams(**{**spec.supervised.to_dict(), "seed": cfg.agent_seed})
        clf = supervised_train(x_train, train.labels, hp)
        taus = threshold_grid(spec.tau_points)
        dev_curve = sweep_tradeoff(clf.with_threshold, taus, dev, obs, knob_name="threshold",
                                   label="supervised", include_cutoff_latency=inc)
        # max dev F1; earliest tau wins ties
        scores = [p.f1 if p.f1 is not None else -1.0 for p in dev_curve.points]
        selected = float(taus[int(np.argmax(scores))])
        clf = clf.with_threshold(selected)
        curves["dev_threshold"] = dev_curve
        curves["test_threshold"] = sweep_tradeoff(clf.with_threshold, taus, test, obs,
                                                  knob_name="threshold", label="supervised",
                                                  include_cutoff_latency=inc)
        report = evaluate_actions(clf.decide(test, observe_matrix(test, obs)), test, "supervised",
                                  knob=selected, include_cutoff_latency=inc).with_baseline(base)
        checkpoint = clf.checkpoint()
    else:
        x_train = observe_matrix(train, obs)
        x_test = observe_matrix(test, obs)
        agent, tr = _train_bandit(cfg, train, x_train, spec.bandit)
        trace = tr.rows()
        report = evaluate_actions(agent.decide(test, x_test), test, "bandit",
                                  include_cutoff_latency=inc).with_baseline(base)
        checkpoint = agent.checkpoint()
        if spec.reward_ratios:
            alpha = spec.bandit.reward.alpha_latency

            def family(ratio):
                if ratio == spec.bandit.reward.ratio:
                    return agent
                bc = BanditConfig(**{**spec.bandit.to_dict(),
                                     "reward": RewardSpec(alpha, ratio * alpha)})
                return _train_bandit(cfg, train, x_train, bc)[0]

            curves["test_reward_ratio"] = sweep_tradeoff(
                family, spec.reward_ratios, test, obs, knob_name="reward_ratio", label="bandit",
                include_cutoff_latency=inc)

    metrics = {"agent": report, **metrics}
    result = RunResult(
        name=cfg.name,
        config_hash=cfg.config_hash(),
        agent=spec.label,
        metrics=metrics,
        curves=curves,
        trace=trace,
        corpus=corpus_info,
        selected_threshold=selected,
        wall_clock=time.perf_counter() - t0,
    )
    return result, checkpoint


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _trace_csv(trace: list) -> str:
    buf = io.StringIO()
    cols = ["step", "running_early_ep_rate", "running_mean_reward", "window_early_ep_rate",
            "window_mean_reward", "window_relaxed_fraction"]
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for row in trace:
        w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in cols])
    return buf.getvalue()


def save_run(result: RunResult, checkpoint: dict, cfg: ExperimentConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _dump(out / "config.json", {**cfg.to_dict(), "config_hash": cfg.config_hash()})
    _dump(out / "corpus.json", result.corpus)
    _dump(out / "result.json", result.payload())
    reports = list(result.metrics.values())
    (out / "metrics.csv").write_text(reports_to_csv(reports))
    (out / "metrics.json").write_text(reports_to_json(reports) + "\n")
    _dump(out / "curves.json", {k: v.to_dict() for k, v in result.curves.items()})
    curve_reports = [p for c in result.curves.values() for p in c.points]
    (out / "curves.csv").write_text(reports_to_csv(curve_reports))
    (out / "trace.csv").write_text(_trace_csv(result.trace))
    _dump(out / "checkpoint.json", checkpoint)
    _dump(out / "timing.json", {"wall_clock_seconds": result.wall_clock})
    return out


def load_run(run_dir) -> RunResult:
    run_dir = Path(run_dir)
    try:
        payload = json.loads((run_dir / "result.json").read_text())
    except OSError as exc:
        raise ConfigError(f"no run result in {run_dir}: {exc}") from exc
    wall = None
    timing = run_dir / "timing.json"
    if timing.exists():
        wall = json.loads(timing.read_text()).get("wall_clock_seconds")
    return RunResult.from_payload(payload, wall)


def default_output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def resolve_output_dir(cfg: ExperimentConfig) -> Path:
    if cfg.output_dir:
        return Path(cfg.output_dir)
    return default_output_root() / f"{cfg.name}-{cfg.config_hash()[:12]}"


def cmd_generate(cfg: ExperimentConfig, out_path) -> dict:
    corpus = generate(cfg.generator)
    return write_corpus(corpus, out_path, cfg.split_ratios, cfg.corpus_seed)


def cmd_run(cfg: ExperimentConfig, out_dir=None) -> RunResult:
    log.info("running %s (%s)", cfg.name, cfg.config_hash()[:12])
    result, checkpoint = run_experiment(cfg)
    save_run(result, checkpoint, cfg, out_dir or resolve_output_dir(cfg))
    return result


def _run_one(args):
    cfg_dict, out_dir = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    cmd_run(cfg, out_dir)
    return out_dir


def cmd_sweep(configs, out_root, workers: int = 1) -> list:
    """Run independent configs in a worker pool; returns their run directories."""
    out_root = Path(out_root)
    jobs = [(c.to_dict(), str(out_root / c.name)) for c in configs]
    names = [c.name for c in configs]
    if len(set(names)) != len(names):
        raise ConfigError("configs in a sweep need distinct names")
    if workers <= 1:
        return [_run_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_one, jobs))


# ---------------------------------------------------------------------------
# report

_TABLE_ROWS = (
    ("Accuracy (%)", "accuracy", False),
    ("Precision (%)", "precision", False),
    ("Recall (%)", "recall", False),
    ("F1 score", "f1", False),
    ("Early EP rate", "early_ep_rate", False),
    ("Early EP rate change", "early_ep_rate_change", True),
    ("TM95 (ms)", "tm95", False),
    ("Latency (TM95)", "tm95_change", True),
    ("DTM95:99 (ms)", "dtm95_99", False),
    ("Latency (DTM95:99)", "dtm95_99_change", True),
)


class ReportError(ConfigError):
    category = "report"


def _cell(value, relative: bool) -> str:
    if value is None:
        return "NA"
    if relative:
        return f"{value:+.2f}%"
    return f"{value:.2f}"


def cmd_report(results) -> tuple:
    """Table-2 layout: one column per run, relative rows against each run's
    own Standard Only measurement. Returns ``(csv_text, plain_text)``."""
    results = list(results)
    if not results:
        raise ReportError("no run results to report")
    columns = []
    for r in results:
        if BASELINE not in r.metrics:
            raise ReportError(f"run {r.name!r} has no standard_only baseline")
        base = r.metrics[BASELINE]
        rep = r.metrics["agent"].with_baseline(base).row()
        columns.append((r.name, rep))
    header = ["Metrics / Model"] + [name for name, _ in columns]
    rows = [[title] + [_cell(rep[key], rel) for _, rep in columns] for title, key, rel in _TABLE_ROWS]

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    widths = [max(len(str(row[i])) for row in [header] + rows) for i in range(len(header))]
    lines = ["  ".join(str(c).ljust(widths[i]) if i == 0 else str(c).rjust(widths[i])
                       for i, c in enumerate(row)) for row in [header] + rows]
    return buf.getvalue(), "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# presets

GROUP_LABELS = {
    "audio": "target_audio",
    "hypothesis": "target_hypothesis",
    "intent_domain": "intent_domain",
    "wakeword_duration": "wakeword_duration",
    "pitch": "pitch_features",
    "pause_duration": "pause_duration",
}


def preset_idealized(n_utterances: int = 100_000, seed: int = 0) -> list:
    """Baselines plus one single-group supervised run per feature group, X=100."""
    gen = {"n_utterances": n_utterances}
    out = [
        ExperimentConfig.from_dict({"name": "standard_only", "generator": gen, "seeds": {"corpus": seed},
                                    "agent": {"kind": "static", "policy": "standard_only"}}),
        ExperimentConfig.from_dict({"name": "relaxed_only", "generator": gen, "seeds": {"corpus": seed},
                                    "agent": {"kind": "static", "policy": "relaxed_only"}}),
        ExperimentConfig.from_dict({"name": "oracle", "generator": gen, "seeds": {"corpus": seed},
                                    "agent": {"kind": "oracle"}}),
    ]
    for g in ("audio", "hypothesis", "intent_domain", "wakeword_duration", "pitch", "pause_duration"):
        out.append(ExperimentConfig.from_dict({
            "name": GROUP_LABELS[g],
            "generator": gen,
            "seeds": {"corpus": seed},
            "observation": {"visible_fraction": 100, "enabled_groups": [g]},
            "agent": {"kind": "supervised"},
        }))
    return out


def preset_information(n_utterances: int = 100_000, seed: int = 0,
                       fractions=(20, 60, 100)) -> list:
    """Supervised classifier, all feature groups, first X percent visible."""
    return [
        ExperimentConfig.from_dict({
            "name": f"supervised_x{int(x)}",
            "generator": {"n_utterances": n_utterances},
            "seeds": {"corpus": seed, "agent": seed},
            "observation": {"visible_fraction": x, "mode": "fraction_known"},
            "agent": {"kind": "supervised"},
        })
        for x in fractions
    ]


def preset_first_segment(n_utterances: int = 500_000, n_online_steps: int = 400_000,
                         seed: int = 0, reward_ratios=(1500.0, 3000.0, 6000.0)) -> list:
    """Supervised vs deep CMAB when only the wake-word-aligned first segment is heard."""
    common = {
        "generator": {"n_utterances": n_utterances},
        "seeds": {"corpus": seed, "agent": seed},
        "observation": {"mode": "first_segment"},
    }
    alpha = RewardSpec().alpha_latency
    return [
        ExperimentConfig.from_dict({**common, "name": "supervised_first_segment",
                                    "agent": {"kind": "supervised"}}),
        ExperimentConfig.from_dict({
            **common,
            "name": "bandit_first_segment",
            "n_online_steps": n_online_steps,
            "agent": {
                "kind": "bandit",
                "config": {"exploration": "concrete_dropout",
                           "reward": {"alpha_latency": alpha,
                                      "beta_cutoff": alpha * reward_ratios[1]}},
                "reward_ratios": list(reward_ratios),
            },
        }),
    ]


PRESETS = {
    "idealized": preset_idealized,
    "information": preset_information,
    "first_segment": preset_first_segment,
}


def preset_configs(name: str, **kwargs) -> list:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name](**kwargs)
