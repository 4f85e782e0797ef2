"""Mixture particle filter with a sampling policy as implicit proposal.

The posterior is a weighted sum of N particle-set components.  Every
particle carries its own history window (the exterior information the
policy conditions on); its current state is the last row of that window.
The prior update samples one action per particle and slides the window;
the measurement update reweights particles inside each component and moves
component weights in proportion to each component's total likelihood.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .evalsuite import Policy, rmse, rollout_batch

log = logging.getLogger(__name__)


@dataclass
class MeasurementModel:
    """z = H s + N(0, R)."""

    R: np.ndarray = field(default_factory=lambda: 0.05 ** 2 * np.eye(2))
    H: np.ndarray | None = None

    def __post_init__(self):
        self.R = np.atleast_2d(np.asarray(self.R, dtype=np.float64))
        if not np.allclose(self.R, self.R.T):
            raise ValueError("measurement covariance must be symmetric")
        try:
            self._chol = np.linalg.cholesky(self.R)
        except np.linalg.LinAlgError:
            raise ValueError("measurement covariance must be positive definite") from None
        self._logdet = 2.0 * np.sum(np.log(np.diag(self._chol)))

    @classmethod
    def isotropic(cls, sigma: float, dim: int = 2) -> "MeasurementModel":
        return cls(sigma ** 2 * np.eye(dim))

    def observe(self, states: np.ndarray) -> np.ndarray:
        return states if self.H is None else states @ np.asarray(self.H).T

    def log_likelihood(self, z: np.ndarray, states: np.ndarray) -> np.ndarray:
        r = np.asarray(z, dtype=np.float64) - self.observe(states)
        sol = np.linalg.solve(self._chol, r.T)
        k = self.R.shape[0]
        return -0.5 * (np.sum(sol ** 2, axis=0) + self._logdet + k * np.log(2 * np.pi))

    def sample(self, states: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        obs = self.observe(states)
        return obs + rng.standard_normal(obs.shape) @ self._chol.T


@dataclass
class Component:
    histories: np.ndarray  # (P, T_h + 1, d)
    weights: np.ndarray  # (P,)

    @property
    def states(self) -> np.ndarray:
        return self.histories[:, -1]

    @property
    def mean(self) -> np.ndarray:
        return self.weights @ self.states

    @property
    def ess(self) -> float:
        return 1.0 / float(np.sum(self.weights ** 2))

    def copy(self) -> "Component":
        return Component(self.histories.copy(), self.weights.copy())


@dataclass
class MixtureBelief:
    components: list[Component]
    pi: np.ndarray
    warnings: list[str] = field(default_factory=list)

    @property
    def mean(self) -> np.ndarray:
        return sum(p * c.mean for p, c in zip(self.pi, self.components))

    def copy(self) -> "MixtureBelief":
        return MixtureBelief([c.copy() for c in self.components], self.pi.copy(), list(self.warnings))

    def normalization_error(self) -> float:
        errs = [abs(float(np.sum(self.pi)) - 1.0)]
        errs += [abs(float(np.sum(c.weights)) - 1.0) for c in self.components]
        return max(errs)


def init_belief(histories, n_particles: int, rng: np.random.Generator, jitter: float = 0.01,
                pi=None) -> MixtureBelief:
    """One component per history window, particles = window + N(0, jitter^2) noise."""
    histories = [np.asarray(h, dtype=np.float64) for h in histories]
    comps = []
    for h in histories:
        H = np.repeat(h[None], n_particles, axis=0)
        if jitter > 0:
            H = H + jitter * rng.standard_normal(H.shape)
        comps.append(Component(H, np.full(n_particles, 1.0 / n_particles)))
    N = len(comps)
    pi = np.full(N, 1.0 / N) if pi is None else np.asarray(pi, dtype=np.float64) / np.sum(pi)
    return MixtureBelief(comps, pi)


def _propagate(histories: np.ndarray, policy: Policy, rng: np.random.Generator,
               warnings: list[str]) -> np.ndarray:
    a = np.asarray(policy.sample(histories, rng), dtype=np.float64)
    nxt = histories[:, -1] + a
    bad = ~np.all(np.isfinite(nxt), axis=1)
    if bad.any():
        good = np.flatnonzero(~bad)
        if good.size == 0:
            raise FloatingPointError("every particle produced a non-finite state")
        src = good[rng.integers(0, good.size, size=int(bad.sum()))]
        msg = f"rejected {int(bad.sum())} non-finite particles, resampled from survivors"
        warnings.append(msg)
        log.warning(msg)
        histories = histories.copy()
        histories[bad] = histories[src]
        nxt[bad] = nxt[src]
    return np.concatenate([histories[:, 1:], nxt[:, None]], axis=1)


def prior_update(belief: MixtureBelief, policy: Policy, rng: np.random.Generator) -> MixtureBelief:
    """Sample each particle forward through the policy; weights are untouched."""
    out = belief.copy()
    for comp in out.components:
        comp.histories = _propagate(comp.histories, policy, rng, out.warnings)
    return out


def _reweight(weights: np.ndarray, loglik: np.ndarray, shift: float) -> np.ndarray:
    return weights * np.exp(loglik - shift)


def measurement_update(belief: MixtureBelief, z, model: MeasurementModel) -> MixtureBelief:
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("measurement must be finite")
    out = belief.copy()
    logliks = [model.log_likelihood(z, c.states) for c in out.components]
    finite = [ll[np.isfinite(ll)] for ll in logliks]
    shift = max((float(np.max(f)) for f in finite if f.size), default=0.0)
    totals = np.empty(len(out.components))
    for n, (comp, ll) in enumerate(zip(out.components, logliks)):
        unnorm = _reweight(comp.weights, ll, shift)
        total = float(np.sum(unnorm))
        totals[n] = total
        if total > 0 and np.isfinite(total):
            comp.weights = unnorm / total
        else:
            comp.weights = np.full(len(unnorm), 1.0 / len(unnorm))
            out.warnings.append(f"component {n}: likelihood underflow, particle weights reset to uniform")
            log.warning(out.warnings[-1])
    scaled = out.pi * totals
    denom = float(np.sum(scaled))
    if denom > 0 and np.isfinite(denom):
        out.pi = scaled / denom
    else:
        out.pi = np.full(len(out.pi), 1.0 / len(out.pi))
        out.warnings.append("all components underflowed, mixture weights reset to uniform")
        log.warning(out.warnings[-1])
    return out


def systematic_indices(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    P = len(weights)
    positions = (rng.random() + np.arange(P)) / P
    cum = np.cumsum(weights)
    cum[-1] = 1.0
    return np.searchsorted(cum, positions, side="right").clip(max=P - 1)


def resample(belief: MixtureBelief, threshold: float, rng: np.random.Generator) -> MixtureBelief:
    """Systematic resampling of any component whose ESS / P falls below ``threshold``."""
    if not 0 < threshold <= 1:
        raise ValueError("threshold must lie in (0, 1]")
    out = belief.copy()
    for comp in out.components:
        P = len(comp.weights)
        if comp.ess / P < threshold:
            idx = systematic_indices(comp.weights, rng)
            comp.histories = comp.histories[idx]
            comp.weights = np.full(P, 1.0 / P)
    return out


@dataclass
class TrackConfig:
    n_particles: int = 100
    sigma: float = 0.05
    ess_threshold: float = 0.5
    jitter: float = 0.01
    keep_clouds: bool = False


@dataclass
class TrackResult:
    means: np.ndarray  # (K, d) posterior means
    component_means: np.ndarray  # (K, N, d)
    pi: np.ndarray  # (K, N)
    cloud_mean: np.ndarray  # (K, d) unweighted mean of the propagated particles
    cloud_std: np.ndarray  # (K, d) unweighted std of the propagated particles
    normalization_error: float
    warnings: list[str]
    clouds: list[list[np.ndarray]] | None = None

    def rmse(self, truth) -> float:
        return rmse(self.means, truth)

    def within_band(self, k: float = 3.0) -> np.ndarray:
        """Per step: posterior mean inside cloud_mean +- k * cloud_std (all components)."""
        return np.all(np.abs(self.means - self.cloud_mean) <= k * self.cloud_std + 1e-12, axis=1)


def track(policy: Policy, histories, measurements, cfg: TrackConfig = TrackConfig(),
          rng: np.random.Generator | None = None, model: MeasurementModel | None = None) -> TrackResult:
    """Filter ``measurements`` (K, d) starting from the given history window(s).

    ``histories`` is a single (T_h + 1, d) window or a list of windows, one
    per mixture component.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    model = MeasurementModel.isotropic(cfg.sigma) if model is None else model
    histories = np.asarray(histories, dtype=np.float64)
    if histories.ndim == 2:
        histories = histories[None]
    belief = init_belief(list(histories), cfg.n_particles, rng, cfg.jitter)
    means, cmeans, pis, cm, cs, clouds = [], [], [], [], [], []
    worst = belief.normalization_error()
    for z in np.asarray(measurements, dtype=np.float64):
        belief = prior_update(belief, policy, rng)
        cloud = np.concatenate([c.states for c in belief.components])
        cm.append(cloud.mean(axis=0))
        cs.append(cloud.std(axis=0))
        belief = measurement_update(belief, z, model)
        worst = max(worst, belief.normalization_error())
        means.append(belief.mean)
        cmeans.append([c.mean for c in belief.components])
        pis.append(belief.pi.copy())
        if cfg.keep_clouds:
            clouds.append([c.states.copy() for c in belief.components])
        belief = resample(belief, cfg.ess_threshold, rng)
        worst = max(worst, belief.normalization_error())
    return TrackResult(np.array(means), np.array(cmeans), np.array(pis), np.array(cm), np.array(cs),
                       worst, belief.warnings, clouds if cfg.keep_clouds else None)


class ParticleFilter:
    """Plain single-set bootstrap filter with the same policy proposal."""

    def __init__(self, policy: Policy, history, cfg: TrackConfig, rng: np.random.Generator,
                 model: MeasurementModel | None = None):
        self.policy, self.cfg, self.rng = policy, cfg, rng
        self.model = MeasurementModel.isotropic(cfg.sigma) if model is None else model
        h = np.asarray(history, dtype=np.float64)
        H = np.repeat(h[None], cfg.n_particles, axis=0)
        if cfg.jitter > 0:
            H = H + cfg.jitter * rng.standard_normal(H.shape)
        self.histories = H
        self.weights = np.full(cfg.n_particles, 1.0 / cfg.n_particles)
        self.warnings: list[str] = []

    def step(self, z) -> np.ndarray:
        self.histories = _propagate(self.histories, self.policy, self.rng, self.warnings)
        ll = self.model.log_likelihood(z, self.histories[:, -1])
        shift = float(np.max(ll[np.isfinite(ll)])) if np.isfinite(ll).any() else 0.0
        w = _reweight(self.weights, ll, shift)
        total = float(np.sum(w))
        self.weights = w / total if total > 0 and np.isfinite(total) else np.full(len(w), 1.0 / len(w))
        est = self.weights @ self.histories[:, -1]
        P = len(self.weights)
        if 1.0 / float(np.sum(self.weights ** 2)) / P < self.cfg.ess_threshold:
            idx = systematic_indices(self.weights, self.rng)
            self.histories = self.histories[idx]
            self.weights = np.full(P, 1.0 / P)
        return est

    def run(self, measurements) -> np.ndarray:
        return np.array([self.step(z) for z in np.asarray(measurements, dtype=np.float64)])


@dataclass
class TrackingCase:
    history: np.ndarray
    truth: np.ndarray  # (K, d) states at steps 1..K
    measurements: np.ndarray  # (K, d)


def make_case(traj_states: np.ndarray, T_h: int, model: MeasurementModel, rng: np.random.Generator) -> TrackingCase:
    """Split a (T_h + 1 + K, d) trajectory into history, truth, and noisy measurements."""
    history = traj_states[:T_h + 1]
    truth = traj_states[T_h + 1:]
    return TrackingCase(history, truth, model.sample(truth, rng))


def open_loop_rmse(policy: Policy, case: TrackingCase, rng: np.random.Generator) -> float:
    states = rollout_batch(policy, case.history[None], len(case.truth), rng)[0]
    return rmse(states[1:], case.truth)


TRACK_COLUMNS = ("step", "true_x", "true_y", "z_x", "z_y", "mean_x", "mean_y")


def export_track(result: TrackResult, case: TrackingCase, path) -> Path:
    path = Path(path)
    N = result.pi.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([*TRACK_COLUMNS, *(f"pi_{n}" for n in range(N))])
        for k in range(len(result.means)):
            w.writerow([k + 1, *map(repr, map(float, case.truth[k])), *map(repr, map(float, case.measurements[k])),
                        *map(repr, map(float, result.means[k])), *map(repr, map(float, result.pi[k]))])
    return path


def export_clouds(result: TrackResult, path) -> Path:
    if result.clouds is None:
        raise ValueError("tracking was run without keep_clouds")
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "component", "particle", "x", "y"])
        for k, comps in enumerate(result.clouds):
            for n, states in enumerate(comps):
                for i, s in enumerate(states):
                    w.writerow([k + 1, n, i, repr(float(s[0])), repr(float(s[1]))])
    return path
