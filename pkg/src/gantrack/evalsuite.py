"""Autoregressive rollouts, MAE, and distribution evaluation against ground truth.

Anything with ``sample(histories, rng) -> actions`` works as a policy here:
the trained generator, the baselines, and the oracles below.  Histories are
raw-unit arrays of shape (B, T_h + 1, state_dim).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from . import lvsys

VIOLIN_COLUMNS = ("variable", "source", "value")
ROLLOUT_COLUMNS = ("case_id", "t", "x", "y")
MAE_COLUMNS = ("iteration", "val_mae")
VARIABLES = ("x", "y")


class Policy(Protocol):
    def sample(self, histories: np.ndarray, rng: np.random.Generator) -> np.ndarray: ...


class RolloutError(FloatingPointError):
    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


class ZeroPolicy:
    """Always outputs zero increments."""

    def sample(self, histories, rng):
        return np.zeros((len(histories), np.shape(histories)[-1]))


class ReplayPolicy:
    """Replays a fixed sequence of actions (one per call), identical across the batch."""

    def __init__(self, actions: np.ndarray):
        self.actions = np.asarray(actions, dtype=np.float64)
        self.t = 0

    def sample(self, histories, rng):
        a = self.actions[self.t]
        self.t += 1
        return np.broadcast_to(a, (len(histories), a.shape[-1])).copy()


class LVOraclePolicy:
    """Exact RK4 increment of known Lotka-Volterra dynamics (a 'perfect generator')."""

    def __init__(self, cfg: lvsys.LVConfig):
        self.cfg = cfg

    def sample(self, histories, rng):
        return lvsys.interval_increment(np.asarray(histories)[:, -1], self.cfg)


@dataclass
class RolloutResult:
    states: np.ndarray  # (T + 1, d), states[0] is the last history state
    actions: np.ndarray  # (T, d)
    case_id: int = -1
    noise_seed: int | None = None


def rollout_batch(policy: Policy, histories: np.ndarray, T: int, rng: np.random.Generator) -> np.ndarray:
    """Propagate B histories for T steps; returns states (B, T + 1, d) starting at s_0."""
    window = np.array(histories, dtype=np.float64)
    if window.ndim == 2:
        window = window[None]
    B, L, d = window.shape
    out = np.empty((B, T + 1, d))
    out[:, 0] = window[:, -1]
    for t in range(T):
        a = np.asarray(policy.sample(window, rng), dtype=np.float64)
        nxt = window[:, -1] + a
        if not np.all(np.isfinite(nxt)):
            raise RolloutError(f"non-finite state produced at step {t + 1}", step=t + 1)
        out[:, t + 1] = nxt
        window = np.concatenate([window[:, 1:], nxt[:, None]], axis=1)
    return out


def rollout(policy: Policy, history: np.ndarray, T: int, noise_seed: int = 0, case_id: int = -1) -> RolloutResult:
    """Single autoregressive rollout: a_t from the window, s_{t+1} = s_t + a_t, slide."""
    history = np.asarray(history, dtype=np.float64)
    if history.ndim != 2:
        raise ValueError(f"history must be (T_h + 1, d), got {history.shape}")
    states = rollout_batch(policy, history[None], T, np.random.default_rng(noise_seed))[0]
    return RolloutResult(states, np.diff(states, axis=0), case_id, noise_seed)


def mae(pred, truth) -> float:
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    if pred.size == 0 or truth.size == 0:
        raise ValueError("MAE of empty input")
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    return float(np.mean(np.abs(pred - truth)))


def rmse(pred, truth) -> float:
    return float(np.sqrt(np.mean((np.asarray(pred) - np.asarray(truth)) ** 2)))


def wasserstein1(u, v) -> float:
    """W1 between 1-D empirical measures via the quantile coupling.

    Integrates |F_u^{-1}(q) - F_v^{-1}(q)| over q in (0, 1); the quantile
    functions are step functions, so the integral is exact on the merged
    breakpoints i/n and j/m.
    """
    u, v = np.sort(np.asarray(u, float).ravel()), np.sort(np.asarray(v, float).ravel())
    n, m = len(u), len(v)
    if n == 0 or m == 0:
        raise ValueError("empty sample")
    if n == m:
        return float(np.mean(np.abs(u - v)))
    q = np.union1d(np.arange(1, n + 1) / n, np.arange(1, m + 1) / m)
    widths = np.diff(np.concatenate([[0.0], q]))
    mid = q - widths / 2
    iu = np.minimum((mid * n).astype(np.int64), n - 1)
    iv = np.minimum((mid * m).astype(np.int64), m - 1)
    return float(np.sum(widths * np.abs(u[iu] - v[iv])))


@dataclass
class DistributionSummary:
    variable: str
    predicted: np.ndarray
    truth: np.ndarray
    bins: int = 20
    w1: float = field(init=False)

    def __post_init__(self):
        self.predicted = np.asarray(self.predicted, float).ravel()
        self.truth = np.asarray(self.truth, float).ravel()
        self.w1 = wasserstein1(self.predicted, self.truth)

    @property
    def mean_pred(self) -> float:
        return float(np.mean(self.predicted))

    @property
    def mean_true(self) -> float:
        return float(np.mean(self.truth))

    @property
    def std_pred(self) -> float:
        return float(np.std(self.predicted))

    @property
    def std_true(self) -> float:
        return float(np.std(self.truth))

    def histogram(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Shared bin edges, predicted counts, truth counts."""
        both = np.concatenate([self.predicted, self.truth])
        edges = np.histogram_bin_edges(both, bins=self.bins)
        return edges, np.histogram(self.predicted, edges)[0], np.histogram(self.truth, edges)[0]

    def as_dict(self) -> dict:
        return {"variable": self.variable, "n_predicted": int(self.predicted.size),
                "n_truth": int(self.truth.size), "mean_pred": self.mean_pred, "mean_true": self.mean_true,
                "std_pred": self.std_pred, "std_true": self.std_true, "wasserstein1": self.w1}


def evaluate_distribution(policy_factory, m: int, n: int, T: int, seed: int,
                          ranges: lvsys.SampleRanges = lvsys.SampleRanges(), dt: float = 0.05,
                          T_h: int = 10, pool: str = "terminal") -> tuple[DistributionSummary, ...]:
    """Pooled predicted vs. true state distributions over m parameter draws.

    For each draw the true trajectory is integrated forward from s0 and the
    history backward from s0; ``n`` rollouts of the policy start from that
    history.  ``policy_factory(cfg)`` returns the policy for one draw (most
    policies ignore ``cfg``; the oracle needs it).  ``pool`` is ``"terminal"``
    (state at T) or ``"all"`` (every step 1..T).
    """
    if min(m, n, T) < 1:
        raise ValueError("m, n and T must be >= 1")
    if pool not in ("terminal", "all"):
        raise ValueError("pool must be 'terminal' or 'all'")
    rng = np.random.default_rng(seed)
    roll_rng = np.random.default_rng([seed, 1])
    pred, true = [], []
    for _ in range(m):
        while True:
            cfg = lvsys.sample_config(rng, ranges, dt, T, T_h)
            try:
                traj = lvsys.case_trajectory(cfg)
                break
            except lvsys.IntegrationError:
                continue
        history = traj.states[:T_h + 1]
        future = traj.states[T_h:]
        states = rollout_batch(policy_factory(cfg), np.repeat(history[None], n, axis=0), T, roll_rng)
        if pool == "terminal":
            pred.append(states[:, -1])
            true.append(future[-1:])
        else:
            pred.append(states[:, 1:].reshape(-1, states.shape[-1]))
            true.append(future[1:])
    pred, true = np.concatenate(pred), np.concatenate(true)
    return tuple(DistributionSummary(name, pred[:, k], true[:, k]) for k, name in enumerate(VARIABLES))


def constant(policy):
    """Wrap a fixed policy as a ``policy_factory``."""
    return lambda cfg: policy


def export_violin_data(summaries, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(VIOLIN_COLUMNS)
        for s in summaries:
            for source, values in (("predicted", s.predicted), ("truth", s.truth)):
                for val in values:
                    w.writerow([s.variable, source, repr(float(val))])
    return path


def read_violin_data(path) -> dict[tuple[str, str], np.ndarray]:
    pools: dict[tuple[str, str], list[float]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != VIOLIN_COLUMNS:
            raise ValueError(f"unexpected header {header}")
        for var, source, val in reader:
            pools.setdefault((var, source), []).append(float(val))
    return {k: np.asarray(v) for k, v in pools.items()}


def export_rollouts(results: list[RolloutResult], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ROLLOUT_COLUMNS)
        for r in results:
            for t, s in enumerate(r.states):
                w.writerow([r.case_id, t, repr(float(s[0])), repr(float(s[1]))])
    return path


def export_mae_curve(iterations, values, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MAE_COLUMNS)
        for it, v in zip(iterations, values):
            w.writerow([int(it), repr(float(v))])
    return path
