"""Sequential online loop: observe, choose, decode, learn."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .environment import Action, Corpus, reward
from .errors import ValidationError
from .policies import BanditAgent


@dataclass
class OnlineTrace:
    steps: list = field(default_factory=list)
    running_early_ep_rate: list = field(default_factory=list)
    running_mean_reward: list = field(default_factory=list)
    window_early_ep_rate: list = field(default_factory=list)
    window_mean_reward: list = field(default_factory=list)
    window_relaxed_fraction: list = field(default_factory=list)

    def rows(self):
        return [
            {
                "step": s,
                "running_early_ep_rate": a,
                "running_mean_reward": b,
                "window_early_ep_rate": c,
                "window_mean_reward": d,
                "window_relaxed_fraction": e,
            }
            for s, a, b, c, d, e in zip(
                self.steps, self.running_early_ep_rate, self.running_mean_reward,
                self.window_early_ep_rate, self.window_mean_reward, self.window_relaxed_fraction,
            )
        ]


@dataclass
class Trajectory:
    actions: np.ndarray
    predictions: np.ndarray
    rewards: np.ndarray


def run_online(agent: BanditAgent, corpus: Corpus, features: np.ndarray, n_steps=None,
               trace_every: int = 1000, record: bool = False):
    """Stream ``corpus`` through ``agent`` for ``n_steps`` decisions.

    The stream wraps around when ``n_steps`` exceeds the corpus size. The
    agent only receives feature rows and the reward of the configuration it
    chose; ``corpus.decode`` is the single place ground truth is read.
    Returns ``(trace, trajectory)``; the trajectory is ``None`` unless
    ``record`` is set.
    """
    n = len(corpus)
    if n == 0:
        raise ValidationError("cannot run online over an empty corpus")
    if features.shape[0] != n:
        raise ValidationError("feature matrix does not match corpus length")
    n_steps = n if n_steps is None else int(n_steps)
    spec = agent.config.reward
    trace = OnlineTrace()
    actions = np.zeros(n_steps, dtype=np.int8) if record else None
    preds = np.zeros((n_steps, 2)) if record else None
    rewards = np.zeros(n_steps) if record else None

    total_cut = total_reward = 0.0
    win_cut = win_reward = win_relaxed = 0.0
    for t in range(n_steps):
        i = t % n
        x = features[i]
        rec = agent.step(x)
        outcome = corpus.decode(i, rec.action)
        r = reward(outcome, spec)
        agent.learn(x, rec.action, r)
        if record:
            actions[t] = rec.action
            preds[t] = rec.predicted
            rewards[t] = r
        total_cut += outcome.cutoff
        total_reward += r
        win_cut += outcome.cutoff
        win_reward += r
        win_relaxed += rec.action == Action.RELAXED
        if trace_every and (t + 1) % trace_every == 0:
            trace.steps.append(t + 1)
            trace.running_early_ep_rate.append(100.0 * total_cut / (t + 1))
            trace.running_mean_reward.append(total_reward / (t + 1))
            trace.window_early_ep_rate.append(100.0 * win_cut / trace_every)
            trace.window_mean_reward.append(win_reward / trace_every)
            trace.window_relaxed_fraction.append(win_relaxed / trace_every)
            win_cut = win_reward = win_relaxed = 0.0
    trajectory = Trajectory(actions, preds, rewards) if record else None
    return trace, trajectory
