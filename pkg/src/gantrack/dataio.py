"""Trajectory CSV ingestion and constant-acceleration Kalman smoothing.

CSV schema (header required, extra columns ignored)::

    agent_id,t,x,y[,vx,vy]

``t`` in seconds, positions in meters, optional velocities in m/s.  Rows may
appear in any agent order but timestamps must increase strictly within an
agent, in file order.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

REQUIRED_COLUMNS = ("agent_id", "t", "x", "y")
OPTIONAL_COLUMNS = ("vx", "vy")


class IngestError(ValueError):
    def __init__(self, message: str, line: int | None = None, agent: str | None = None):
        super().__init__(message)
        self.line = line
        self.agent = agent


@dataclass
class RawTrajectoryRecord:
    agent_id: str
    t: float
    x: float
    y: float
    vx: float | None = None
    vy: float | None = None


def ingest_csv(path) -> dict[str, list[RawTrajectoryRecord]]:
    """Records grouped by agent (first-appearance order), each list time-sorted."""
    path = Path(path)
    groups: dict[str, list[RawTrajectoryRecord]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise IngestError(f"{path}: missing column(s) {', '.join(missing)}", line=1)
        has_v = all(c in header for c in OPTIONAL_COLUMNS)
        for row in reader:
            line = reader.line_num
            try:
                vals = {c: float(row[c]) for c in REQUIRED_COLUMNS[1:]}
                if has_v and row["vx"] not in ("", None):
                    vals["vx"], vals["vy"] = float(row["vx"]), float(row["vy"])
            except (TypeError, ValueError):
                bad = next(c for c in (*REQUIRED_COLUMNS[1:], *OPTIONAL_COLUMNS)
                           if c in row and not _is_float(row[c]))
                raise IngestError(f"{path}: line {line}: non-numeric value {row[bad]!r} in column {bad!r}",
                                  line=line) from None
            agent = row["agent_id"]
            recs = groups.setdefault(agent, [])
            if recs and vals["t"] <= recs[-1].t:
                raise IngestError(f"{path}: line {line}: timestamps for agent {agent!r} are not strictly "
                                  f"increasing ({vals['t']} after {recs[-1].t})", line=line, agent=agent)
            recs.append(RawTrajectoryRecord(agent, **vals))
    return groups


def _is_float(s) -> bool:
    if s in ("", None):
        return True
    try:
        float(s)
        return True
    except ValueError:
        return False


def export_csv(groups: dict[str, list[RawTrajectoryRecord]], path) -> Path:
    path = Path(path)
    with_v = any(r.vx is not None for recs in groups.values() for r in recs)
    cols = REQUIRED_COLUMNS + (OPTIONAL_COLUMNS if with_v else ())
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for recs in groups.values():
            for r in recs:
                row = [r.agent_id, repr(r.t), repr(r.x), repr(r.y)]
                if with_v:
                    row += ["" if r.vx is None else repr(r.vx), "" if r.vy is None else repr(r.vy)]
                w.writerow(row)
    return path


@dataclass
class EKFConfig:
    """Noise parameters of the per-axis constant-acceleration model."""

    process_noise: float = 1.0  # jerk spectral density (m^2/s^5)
    position_noise: float = 0.25  # measurement variance (m^2)
    velocity_noise: float = 1.0  # measurement variance ((m/s)^2), used when velocities are present
    initial_variance: float = 100.0

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) >= 0:
                raise ValueError(f"{f.name} must be nonnegative")
        if self.process_noise <= 0 or self.initial_variance <= 0:
            raise ValueError("process_noise and initial_variance must be positive")

    @classmethod
    def from_file(cls, path) -> "EKFConfig":
        doc = json.loads(Path(path).read_text())
        unknown = set(doc) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown EKF config keys: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SmoothedTrajectory:
    agent_id: str
    t: np.ndarray
    position: np.ndarray  # (n, 2)
    velocity: np.ndarray  # (n, 2)
    acceleration: np.ndarray  # (n, 2)


class FilterError(np.linalg.LinAlgError):
    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


def _transition(dt: float, q: float) -> tuple[np.ndarray, np.ndarray]:
    F = np.array([[1.0, dt, 0.5 * dt * dt], [0.0, 1.0, dt], [0.0, 0.0, 1.0]])
    # continuous white-jerk noise, discretized
    Q = q * np.array([[dt ** 5 / 20, dt ** 4 / 8, dt ** 3 / 6],
                      [dt ** 4 / 8, dt ** 3 / 3, dt ** 2 / 2],
                      [dt ** 3 / 6, dt ** 2 / 2, dt]])
    return F, Q


def kalman_ca(t: np.ndarray, z: np.ndarray, cfg: EKFConfig, zv: np.ndarray | None = None) -> np.ndarray:
    """Causal constant-acceleration filter on one axis; returns states (n, 3) = (p, v, a)."""
    n = len(t)
    x = np.array([z[0], 0.0 if zv is None else zv[0], 0.0])
    P = cfg.initial_variance * np.eye(3)
    if zv is None:
        Hm, R = np.array([[1.0, 0.0, 0.0]]), np.array([[cfg.position_noise]])
    else:
        Hm, R = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]), np.diag([cfg.position_noise, cfg.velocity_noise])
    out = np.empty((n, 3))
    for k in range(n):
        if k > 0:
            F, Q = _transition(t[k] - t[k - 1], cfg.process_noise)
            x = F @ x
            P = F @ P @ F.T + Q
        meas = np.array([z[k]]) if zv is None else np.array([z[k], zv[k]])
        S = Hm @ P @ Hm.T + R
        try:
            L = np.linalg.cholesky(S)
        except np.linalg.LinAlgError:
            raise FilterError(f"innovation covariance not positive definite at step {k}", step=k) from None
        K = np.linalg.solve(L.T, np.linalg.solve(L, Hm @ P)).T
        x = x + K @ (meas - Hm @ x)
        IKH = np.eye(3) - K @ Hm
        P = IKH @ P @ IKH.T + K @ R @ K.T  # Joseph form
        out[k] = x
    return out


def ekf_smooth(records: list[RawTrajectoryRecord], cfg: EKFConfig = EKFConfig()) -> SmoothedTrajectory:
    """Forward filter of one agent's records with a linear constant-acceleration model per axis."""
    if len(records) < 2:
        raise ValueError("smoothing needs at least 2 samples")
    t = np.array([r.t for r in records])
    pos = np.array([[r.x, r.y] for r in records])
    has_v = all(r.vx is not None for r in records)
    vel = np.array([[r.vx, r.vy] for r in records]) if has_v else None
    axes = [kalman_ca(t, pos[:, k], cfg, None if vel is None else vel[:, k]) for k in range(2)]
    st = np.stack(axes, axis=1)  # (n, 2, 3)
    return SmoothedTrajectory(records[0].agent_id, t, st[:, :, 0], st[:, :, 1], st[:, :, 2])


def smooth_all(groups: dict[str, list[RawTrajectoryRecord]], cfg: EKFConfig = EKFConfig()) -> list[SmoothedTrajectory]:
    return [ekf_smooth(recs, cfg) for recs in groups.values()]


SMOOTH_COLUMNS = ("agent_id", "t", "x", "y", "vx", "vy", "ax", "ay")


def export_smoothed(trajs: list[SmoothedTrajectory], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SMOOTH_COLUMNS)
        for tr in trajs:
            for k in range(len(tr.t)):
                w.writerow([tr.agent_id, repr(float(tr.t[k])), *map(repr, map(float, tr.position[k])),
                            *map(repr, map(float, tr.velocity[k])), *map(repr, map(float, tr.acceleration[k]))])
    return path
