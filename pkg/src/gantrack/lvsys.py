"""Lotka-Volterra ground truth: dynamics, RK4 integration, datasets.

A case is one parameter draw (a, b, c, d) and initial state s0.  Its
trajectory spans t = -T_h .. T with s0 at index T_h: the history part is
obtained by integrating backward from s0, the future part forward.  The
action at step t is the increment a_t = s_{t+1} - s_t.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

DATASET_FORMAT = "gantrack-dataset"
DATASET_VERSION = 1
STATE_BOUND = 1e6


@dataclass(frozen=True)
class LVConfig:
    a: float
    b: float
    c: float
    d: float
    x0: float = 1.0
    y0: float = 1.0
    dt: float = 0.05
    T: int = 40
    T_h: int = 10
    # RK4 sub-steps per output interval; one step of 0.05 drifts by up to ~6e-3 in V on these orbits
    substeps: int = 16

    def __post_init__(self):
        if min(self.a, self.b, self.c, self.d) <= 0:
            raise ValueError(f"rate parameters must be positive, got {self.params}")
        if self.x0 < 0 or self.y0 < 0:
            raise ValueError("initial populations must be nonnegative")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")

    @property
    def params(self) -> tuple[float, float, float, float]:
        return (self.a, self.b, self.c, self.d)

    @property
    def s0(self) -> np.ndarray:
        return np.array([self.x0, self.y0])


@dataclass
class Trajectory:
    states: np.ndarray  # (n, 2)
    dt: float
    origin: int = 0  # index of t = 0

    def __len__(self):
        return len(self.states)

    @property
    def actions(self) -> np.ndarray:
        return np.diff(self.states, axis=0)


class IntegrationError(RuntimeError):
    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


def lv_derivative(s, cfg: LVConfig) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    x, y = s[..., 0], s[..., 1]
    return np.stack([cfg.a * x - cfg.b * x * y, cfg.c * x * y - cfg.d * y], axis=-1)


def rk4_increment(s, cfg: LVConfig, sign: float = 1.0, dt: float | None = None) -> np.ndarray:
    h = cfg.dt if dt is None else dt
    k1 = sign * lv_derivative(s, cfg)
    k2 = sign * lv_derivative(s + 0.5 * h * k1, cfg)
    k3 = sign * lv_derivative(s + 0.5 * h * k2, cfg)
    k4 = sign * lv_derivative(s + h * k3, cfg)
    return h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def interval_increment(s, cfg: LVConfig, sign: float = 1.0, dt: float | None = None) -> np.ndarray:
    """State change over one output interval, taken as ``cfg.substeps`` RK4 steps."""
    h = (cfg.dt if dt is None else dt) / cfg.substeps
    s0 = np.asarray(s, dtype=np.float64)
    x = s0
    for _ in range(cfg.substeps):
        x = x + rk4_increment(x, cfg, sign, h)
    return x - s0


def integrate(s, cfg: LVConfig, steps: int, direction: str = "forward", dt: float | None = None) -> Trajectory:
    """RK4 trajectory of ``steps + 1`` states starting at ``s`` (backward negates time)."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if direction not in ("forward", "backward"):
        raise ValueError(f"direction must be 'forward' or 'backward', got {direction!r}")
    sign = 1.0 if direction == "forward" else -1.0
    out = np.empty((steps + 1, 2))
    out[0] = s
    for k in range(steps):
        with np.errstate(over="ignore", invalid="ignore"):
            out[k + 1] = out[k] + interval_increment(out[k], cfg, sign, dt)
        if not (np.all(np.isfinite(out[k + 1])) and np.all(out[k + 1] < STATE_BOUND)
                and np.all(out[k + 1] > 0 if np.all(out[0] > 0) else out[k + 1] >= 0)):
            raise IntegrationError(f"{direction} integration left the valid region at step {k + 1}: "
                                   f"{out[k + 1]}", step=k + 1)
    return Trajectory(out, cfg.dt if dt is None else dt, origin=0)


def conserved_quantity(s, cfg: LVConfig) -> np.ndarray:
    """V(x, y) = c x - d ln x + b y - a ln y, constant along exact orbits."""
    s = np.asarray(s, dtype=np.float64)
    x, y = s[..., 0], s[..., 1]
    return cfg.c * x - cfg.d * np.log(x) + cfg.b * y - cfg.a * np.log(y)


def _telescoped(states: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rebuild states by sequential addition so that s[t+1] == s[t] + a[t] bit-for-bit."""
    actions = np.diff(states, axis=0)
    out = np.empty_like(states)
    out[0] = states[0]
    for t in range(len(actions)):
        out[t + 1] = out[t] + actions[t]
    return out, actions


def case_trajectory(cfg: LVConfig, T: int | None = None) -> Trajectory:
    """Trajectory over t = -T_h .. T (origin index T_h)."""
    T = cfg.T if T is None else T
    back = integrate(cfg.s0, cfg, cfg.T_h, "backward").states if cfg.T_h > 0 else cfg.s0[None]
    fwd = integrate(cfg.s0, cfg, T, "forward").states
    states = np.concatenate([back[::-1], fwd[1:]], axis=0)
    states, _ = _telescoped(states)
    return Trajectory(states, cfg.dt, origin=cfg.T_h)


# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class SampleRanges:
    params: tuple[float, float] = (3.0, 5.0)
    init: tuple[float, float] = (1.0, 3.0)

    def __post_init__(self):
        for name in ("params", "init"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"invalid {name} range [{lo}, {hi}]: min exceeds max")
        if self.params[0] <= 0 or self.init[0] <= 0:
            raise ValueError("ranges must be strictly positive for Lotka-Volterra")


@dataclass
class PairSet:
    """(history window, action) pairs; histories are (N, T_h + 1, 2)."""

    histories: np.ndarray
    actions: np.ndarray
    case_index: np.ndarray

    def __len__(self):
        return len(self.actions)

    def subset(self, idx) -> "PairSet":
        return PairSet(self.histories[idx], self.actions[idx], self.case_index[idx])


@dataclass
class Case:
    params: np.ndarray  # system parameters
    s0: np.ndarray
    trajectory: np.ndarray  # (T_h + T + 1, 2), s0 at index T_h
    actions: np.ndarray  # (T_h + T, 2)


@dataclass
class Dataset:
    cases: list[Case]
    seed: int
    dt: float
    T_h: int
    T: int
    system: str = "lv"
    ranges: dict = field(default_factory=dict)
    redraws: int = 0

    def pairs(self, cases: slice | list[int] | None = None) -> PairSet:
        sel = range(len(self.cases)) if cases is None else (
            range(*cases.indices(len(self.cases))) if isinstance(cases, slice) else cases)
        H, A, C = [], [], []
        for ci in sel:
            c = self.cases[ci]
            for j in range(self.T):
                H.append(c.trajectory[j:j + self.T_h + 1])
                A.append(c.actions[j + self.T_h])
                C.append(ci)
        return PairSet(np.asarray(H), np.asarray(A), np.asarray(C, dtype=np.int64))

    def config(self, i: int) -> LVConfig:
        c = self.cases[i]
        return LVConfig(*c.params, x0=c.s0[0], y0=c.s0[1], dt=self.dt, T=self.T, T_h=self.T_h)

    def extended(self, i: int, horizon: int) -> tuple[np.ndarray, np.ndarray]:
        """History window (T_h+1, 2) ending at s0 and the true future (horizon+1, 2) from s0."""
        if self.system == "lv":
            traj = case_trajectory(self.config(i), T=horizon).states
        elif self.system == "const_accel":
            traj = const_accel_states(self.cases[i].params, self.dt, self.T_h, horizon)
        else:
            raise ValueError(f"unknown system {self.system!r}")
        return traj[:self.T_h + 1], traj[self.T_h:]

    # persistence -------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "format": DATASET_FORMAT,
            "version": DATASET_VERSION,
            "system": self.system,
            "seed": self.seed,
            "dt": self.dt,
            "T_h": self.T_h,
            "T": self.T,
            "ranges": self.ranges,
            "redraws": self.redraws,
            "cases": [{"params": c.params.tolist(), "s0": c.s0.tolist(),
                       "trajectory": c.trajectory.tolist(), "actions": c.actions.tolist()}
                      for c in self.cases],
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict()))
        return path

    @classmethod
    def load(cls, path) -> "Dataset":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: not a valid dataset file ({exc})") from None
        if doc.get("format") != DATASET_FORMAT:
            raise ValueError(f"{path}: not a {DATASET_FORMAT} file")
        if doc.get("version") != DATASET_VERSION:
            raise ValueError(f"{path}: dataset version {doc.get('version')!r}, expected {DATASET_VERSION}")
        cases = [Case(np.asarray(c["params"]), np.asarray(c["s0"]),
                      np.asarray(c["trajectory"]), np.asarray(c["actions"])) for c in doc["cases"]]
        return cls(cases, doc["seed"], doc["dt"], doc["T_h"], doc["T"], doc["system"],
                   doc.get("ranges", {}), doc.get("redraws", 0))


def sample_config(rng: np.random.Generator, ranges: SampleRanges = SampleRanges(), dt: float = 0.05,
                  T: int = 40, T_h: int = 10) -> LVConfig:
    a, b, c, d = rng.uniform(*ranges.params, size=4)
    x0, y0 = rng.uniform(*ranges.init, size=2)
    return LVConfig(a, b, c, d, x0, y0, dt=dt, T=T, T_h=T_h)


def sample_dataset(count: int, seed: int, ranges: SampleRanges = SampleRanges(), dt: float = 0.05,
                   T_h: int = 10, T: int = 40, max_redraws: int = 1000) -> Dataset:
    """``count`` cases with params ~ U[ranges.params] and s0 ~ U[ranges.init]."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    cases, redraws = [], 0
    while len(cases) < count:
        cfg = sample_config(rng, ranges, dt, T, T_h)
        try:
            traj = case_trajectory(cfg)
        except IntegrationError as exc:
            redraws += 1
            log.info("redrawing case %d: %s", len(cases), exc)
            if redraws > max_redraws:
                raise
            continue
        cases.append(Case(np.array(cfg.params), cfg.s0, traj.states, traj.actions))
    return Dataset(cases, seed, dt, T_h, T, "lv",
                   {"params": list(ranges.params), "init": list(ranges.init)}, redraws)


def const_accel_states(params, dt: float, T_h: int, T: int) -> np.ndarray:
    """Quadratic trajectory p0 + v0 t + a t^2 / 2 over t = -T_h..T (steps of dt)."""
    p0, v0, acc = np.asarray(params, dtype=np.float64).reshape(3, 2)
    t = dt * np.arange(-T_h, T + 1)[:, None]
    return p0 + v0 * t + 0.5 * acc * t ** 2


def sample_const_accel_dataset(count: int, seed: int, dt: float = 0.05, T_h: int = 10,
                               T: int = 40) -> Dataset:
    """Synthetic constant-acceleration cases; CAM is exact on these."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    cases = []
    for _ in range(count):
        params = np.concatenate([rng.uniform(1, 3, 2), rng.uniform(-1, 1, 2), rng.uniform(-0.5, 0.5, 2)])
        states, actions = _telescoped(const_accel_states(params, dt, T_h, T))
        cases.append(Case(params, states[T_h].copy(), states, actions))
    return Dataset(cases, seed, dt, T_h, T, "const_accel", {}, 0)
