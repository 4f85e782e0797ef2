"""Two-player game optimization: losses, gradient field, SGA and consensus steps.

The state is x = (theta, phi) with theta the discriminator and phi the
generator parameters.  Each player ascends its own objective, so the
gradient field is v = (-grad_theta L_D, -grad_phi L_G).  Consensus
optimization follows u = v - gamma * grad(0.5 * ||v||^2) = (I - gamma H^T) v,
with the second-order term computed exactly by double backprop.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import PlayerParams, Tensor
from .lvsys import PairSet
from .nets import GANModel, Normalizer, generate, save_checkpoint

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iteration", "disc_loss", "gen_loss", "v_norm", "val_mae")


@dataclass
class OptimizerConfig:
    alpha: float = 0.01
    gamma: float = 0.0
    rho: float = 0.9
    eps: float = 1e-8
    iterations: int = 30_000
    batch_size: int = 64
    log_every: int = 100
    precondition: bool = True  # False: raw x + alpha * u, used for closed-form checks
    divergence_threshold: float = 1e6
    checkpoint_every: int = 0  # 0: only at the end
    seed: int = 0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not 0 < self.rho < 1:
            raise ValueError("rho must lie in (0, 1)")


@dataclass
class RMSPropState:
    mean_square: np.ndarray

    @classmethod
    def zeros(cls, dim: int) -> "RMSPropState":
        return cls(np.zeros(dim))

    def precondition(self, u: np.ndarray, cfg: OptimizerConfig) -> np.ndarray:
        self.mean_square = cfg.rho * self.mean_square + (1.0 - cfg.rho) * u * u
        return u / (np.sqrt(self.mean_square) + cfg.eps)


class NonFiniteStepError(FloatingPointError):
    def __init__(self, iteration, v_norm, correction_norm):
        super().__init__(f"non-finite update at iteration {iteration}: "
                         f"|v|={v_norm:.6g}, |H^T v|={correction_norm:.6g}")
        self.iteration = iteration
        self.v_norm = v_norm
        self.correction_norm = correction_norm


# ---------------------------------------------------------------------------
# losses


def disc_loss(d_real, d_fake) -> Tensor:
    """-(mean log D(real) + mean log(1 - D(fake)))."""
    d_real, d_fake = dc.const(d_real), dc.const(d_fake)
    return dc.neg(dc.add(dc.mean(dc.log(d_real)), dc.mean(dc.log(dc.sub(1.0, d_fake)))))


def gen_loss(d_fake) -> Tensor:
    """Non-saturating generator loss -mean log D(fake)."""
    return dc.neg(dc.mean(dc.log(dc.const(d_fake))))


# ---------------------------------------------------------------------------
# games


class Game(Protocol):
    params: PlayerParams

    def field(self, batch, create_graph: bool) -> tuple[list[Tensor], dict]:
        """Gradient-field pieces (theta part, then phi part) and loss values."""


def _ascent(loss: Tensor, params: Sequence[Tensor], create_graph: bool) -> list[Tensor]:
    gm = dc.backward(loss, params, create_graph=create_graph)
    return [dc.neg(gm[p]) for p in params]


class BilinearGame:
    """f(theta, phi) = sum(theta * phi); the discriminator maximizes f, the generator minimizes it."""

    def __init__(self, theta, phi):
        self.params = PlayerParams([Tensor(np.atleast_1d(np.asarray(theta, float)), requires_grad=True)],
                                   [Tensor(np.atleast_1d(np.asarray(phi, float)), requires_grad=True)])

    def field(self, batch=None, create_graph: bool = False):
        (th,), (ph,) = self.params.disc, self.params.gen
        f = dc.sum(dc.mul(th, ph))
        v = _ascent(dc.neg(f), [th], create_graph) + _ascent(f, [ph], create_graph)
        return v, {"disc_loss": -f.item(), "gen_loss": f.item()}


@dataclass
class GANBatch:
    """Normalized condition sequences, real actions and generator noise."""

    X: np.ndarray
    Y: np.ndarray
    Z: np.ndarray


class GANGame:
    def __init__(self, model: GANModel):
        self.model = model
        self.params = model.player_params()

    def losses(self, batch: GANBatch) -> tuple[Tensor, Tensor]:
        disc, gen = self.model.disc, self.model.gen
        h = disc.encode(batch.X)
        fake = generate(gen, batch.X, batch.Z)
        d_real = disc.score(h, batch.Y)
        d_fake = disc.score(h, fake)
        return disc_loss(d_real, d_fake), gen_loss(d_fake)

    def field(self, batch: GANBatch, create_graph: bool = False):
        ld, lg = self.losses(batch)
        v = _ascent(ld, self.params.disc, create_graph) + _ascent(lg, self.params.gen, create_graph)
        return v, {"disc_loss": ld.item(), "gen_loss": lg.item()}


def _flat(pieces: Sequence[Tensor]) -> np.ndarray:
    return np.concatenate([p.data.reshape(-1) for p in pieces]) if pieces else np.zeros(0)


def gradient_field(game: Game, batch=None) -> np.ndarray:
    v, _ = game.field(batch, create_graph=False)
    return _flat(v)


# ---------------------------------------------------------------------------
# updates


def _apply_direction(state: PlayerParams, u: np.ndarray, cfg: OptimizerConfig,
                     rms: RMSPropState | None) -> np.ndarray:
    step = rms.precondition(u, cfg) if (cfg.precondition and rms is not None) else u
    x = state.flat() + cfg.alpha * step
    state.assign_flat(x)
    return x


def sga_step(state: PlayerParams, v: np.ndarray, cfg: OptimizerConfig,
             rms: RMSPropState | None = None) -> np.ndarray:
    """x' = x + alpha * P(v); gamma is ignored.  ``rms=None`` or ``precondition=False`` means P = I."""
    return _apply_direction(state, np.asarray(v, dtype=np.float64), cfg, rms)


@dataclass
class StepInfo:
    x: np.ndarray
    v_norm: float
    correction_norm: float
    disc_loss: float
    gen_loss: float


def consensus_step(game: Game, batch, cfg: OptimizerConfig, rms: RMSPropState | None = None,
                   iteration: int = 0) -> StepInfo:
    """x' = x + alpha * P(v - gamma * H^T v)."""
    second_order = cfg.gamma > 0
    v_pieces, info = game.field(batch, create_graph=second_order)
    v = _flat(v_pieces)
    v_norm = float(np.linalg.norm(v))
    if second_order:
        r = None
        for piece in v_pieces:
            term = dc.sum(dc.square(piece))
            r = term if r is None else dc.add(r, term)
        hv = dc.backward(dc.mul(r, 0.5), game.params.all()).flat(game.params.all())
        u = v - cfg.gamma * hv
        corr = float(np.linalg.norm(hv))
    else:
        u, corr = v, 0.0
    if not np.all(np.isfinite(u)):
        raise NonFiniteStepError(iteration, v_norm, corr)
    x = _apply_direction(game.params, u, cfg, rms)
    return StepInfo(x, v_norm, corr, info["disc_loss"], info["gen_loss"])


# ---------------------------------------------------------------------------
# training loop


@dataclass
class LogRecord:
    iteration: int
    disc_loss: float
    gen_loss: float
    v_norm: float
    val_mae: float


@dataclass
class TrainingLog:
    initial: LogRecord
    records: list[LogRecord] = field(default_factory=list)
    diverged: bool = False
    diagnostic: str = ""

    @property
    def final_val_mae(self) -> float:
        return self.records[-1].val_mae if self.records else self.initial.val_mae

    def curve(self) -> tuple[np.ndarray, np.ndarray]:
        recs = [self.initial, *self.records]
        return np.array([r.iteration for r in recs]), np.array([r.val_mae for r in recs])


class CSVLog:
    """Append-only training log."""

    def __init__(self, path):
        self.path = Path(path)
        if not self.path.exists() or self.path.stat().st_size == 0:
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(LOG_COLUMNS)

    def append(self, rec: LogRecord) -> None:
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([rec.iteration, repr(rec.disc_loss), repr(rec.gen_loss),
                                     repr(rec.v_norm), repr(rec.val_mae)])


def read_log(path) -> list[LogRecord]:
    with open(path, newline="") as fh:
        return [LogRecord(int(r["iteration"]), float(r["disc_loss"]), float(r["gen_loss"]),
                          float(r["v_norm"]), float(r["val_mae"])) for r in csv.DictReader(fh)]


def validation_mae(model: GANModel, val: PairSet, noise: np.ndarray) -> float:
    """One-step action MAE in raw units with a fixed noise draw per pair."""
    norm = model.normalizer
    with dc.no_grad():
        pred = generate(model.gen, norm.states(val.histories), noise).data
    return float(np.mean(np.abs(norm.actions_inv(pred) - val.actions)))


def make_batch(model: GANModel, pairs: PairSet, rng: np.random.Generator, size: int) -> GANBatch:
    idx = rng.integers(0, len(pairs), size=size)
    norm = model.normalizer
    H = pairs.histories[idx]
    return GANBatch(norm.states(H), norm.actions(pairs.actions[idx]),
                    model.gen.sample_noise(rng, size, H.shape[1]))


def train(model: GANModel, data: PairSet, cfg: OptimizerConfig, val: PairSet | None = None,
          log_path=None, checkpoint_path=None, fit_normalizer: bool = True) -> TrainingLog:
    """Simultaneous consensus-optimization training of generator and discriminator."""
    if fit_normalizer:
        model.normalizer = Normalizer.fit(data.histories, data.actions)
    if val is None:
        val = data.subset(np.arange(min(256, len(data))))
    rng = np.random.default_rng(cfg.seed)
    val_noise = model.gen.sample_noise(np.random.default_rng([cfg.seed, 1]), len(val), val.histories.shape[1])
    game = GANGame(model)
    rms = RMSPropState.zeros(game.params.dim)
    writer = CSVLog(log_path) if log_path is not None else None
    meta = {"alpha": cfg.alpha, "gamma": cfg.gamma, "seed": cfg.seed, "iteration": 0}

    tlog = TrainingLog(LogRecord(0, float("nan"), float("nan"), float("nan"),
                                 validation_mae(model, val, val_noise)))
    done = 0
    for it in range(1, cfg.iterations + 1):
        done = it
        batch = make_batch(model, data, rng, cfg.batch_size)
        info = consensus_step(game, batch, cfg, rms, iteration=it)
        if info.v_norm > cfg.divergence_threshold:
            tlog.diverged = True
            tlog.diagnostic = (f"diverged at iteration {it}: |v|={info.v_norm:.6g} exceeds "
                               f"{cfg.divergence_threshold:.3g}")
            rec = LogRecord(it, info.disc_loss, info.gen_loss, info.v_norm, validation_mae(model, val, val_noise))
            tlog.records.append(rec)
            if writer:
                writer.append(rec)
            log.warning(tlog.diagnostic)
            break
        if it % cfg.log_every == 0:
            rec = LogRecord(it, info.disc_loss, info.gen_loss, info.v_norm, validation_mae(model, val, val_noise))
            tlog.records.append(rec)
            if writer:
                writer.append(rec)
            log.debug("iter %d  L_D=%.4f  L_G=%.4f  |v|=%.4g  mae=%.4g", it, rec.disc_loss,
                      rec.gen_loss, rec.v_norm, rec.val_mae)
        if checkpoint_path is not None and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
            save_checkpoint(model, checkpoint_path, {**meta, "iteration": it})
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path, {**meta, "iteration": done, "diverged": tlog.diverged})
    return tlog


def config_dict(cfg: OptimizerConfig) -> dict:
    return asdict(cfg)
