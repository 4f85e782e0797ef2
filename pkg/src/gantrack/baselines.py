"""Comparison models sharing the policy interface ``sample(histories, rng)``.

* CAM: constant-acceleration extrapolation from a least-squares quadratic
  fit over the history window.
* GMR: Gaussian mixture over [flattened history || action], sampled from
  the conditional mixture given a history.
* P-MLP / P-LSTM: MSE-trained networks with Gaussian noise added to the
  (normalized) input during training and prediction.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .gameopt import RMSPropState
from .lvsys import PairSet
from .nets import Dense, LSTMLayer, Normalizer, _fill_params, register_checkpoint_kind

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# CAM


def _quadratic_design(L: int) -> np.ndarray:
    t = np.arange(L, dtype=np.float64)
    return np.stack([np.ones(L), t, t ** 2], axis=1)


def cam_fit(history) -> np.ndarray:
    """Per-component quadratic coefficients (3, d) in step-index time, t = 0..L-1."""
    history = np.asarray(history, dtype=np.float64)
    if history.ndim == 1:
        history = history[:, None]
    if len(history) < 3:
        raise ValueError(f"CAM needs at least 3 history states, got {len(history)}")
    coef, *_ = np.linalg.lstsq(_quadratic_design(len(history)), history, rcond=None)
    return coef


def cam_predict(history, horizon: int) -> np.ndarray:
    """Extrapolated states (horizon + 1, d); row 0 is the last observed state.

    The fitted quadratic supplies increments, which are added to the last
    observed state.
    """
    history = np.asarray(history, dtype=np.float64)
    one_d = history.ndim == 1
    h = history[:, None] if one_d else history
    coef = cam_fit(h)
    L = len(h)
    t = np.arange(L - 1, L + horizon, dtype=np.float64)
    p = coef[0] + np.outer(t, coef[1]) + np.outer(t ** 2, coef[2])
    steps = np.vstack([np.zeros((1, h.shape[1])), np.cumsum(np.diff(p, axis=0), axis=0)])
    out = h[-1] + steps
    return out[:, 0] if one_d else out


class CAMPolicy:
    """Next-step increment of the quadratic fitted to each history window."""

    def sample(self, histories, rng=None):
        histories = np.asarray(histories, dtype=np.float64)
        B, L, d = histories.shape
        if L < 3:
            raise ValueError(f"CAM needs at least 3 history states, got {L}")
        A = _quadratic_design(L)
        coef, *_ = np.linalg.lstsq(A, histories.transpose(1, 0, 2).reshape(L, B * d), rcond=None)
        t0, t1 = L - 1.0, float(L)
        inc = coef[1] * (t1 - t0) + coef[2] * (t1 ** 2 - t0 ** 2)
        return inc.reshape(B, d)


# ---------------------------------------------------------------------------
# GMR


class SingularCovarianceError(np.linalg.LinAlgError):
    pass


@dataclass
class GMRModel:
    """Joint Gaussian mixture over [input || output] with ``n_in`` input dimensions."""

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    n_in: int
    loglik_history: list[float] = field(default_factory=list)
    kind = "gmr"

    @property
    def K(self) -> int:
        return len(self.weights)

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {"gmr/weights": self.weights, "gmr/means": self.means, "gmr/covs": self.covs}

    def config_dict(self) -> dict:
        return {"n_in": self.n_in, "K": self.K}

    @classmethod
    def from_state(cls, config: dict, arrays: dict) -> "GMRModel":
        return cls(arrays["gmr/weights"], arrays["gmr/means"], arrays["gmr/covs"], int(config["n_in"]))

    def conditional(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Responsibilities (B, K), conditional means (B, K, d_out), covariances (K, d_out, d_out)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        i = self.n_in
        logh = np.empty((len(x), self.K))
        cmeans = np.empty((len(x), self.K, self.means.shape[1] - i))
        ccovs = np.empty((self.K, self.means.shape[1] - i, self.means.shape[1] - i))
        for k in range(self.K):
            mu, S = self.means[k], self.covs[k]
            Sxx, Syx, Syy = S[:i, :i], S[i:, :i], S[i:, i:]
            gain = np.linalg.solve(Sxx, Syx.T).T
            logh[:, k] = np.log(self.weights[k]) + _gauss_logpdf(x, mu[:i], Sxx)
            cmeans[:, k] = mu[i:] + (x - mu[:i]) @ gain.T
            ccovs[k] = Syy - gain @ Syx.T
        logh -= logh.max(axis=1, keepdims=True)
        h = np.exp(logh)
        h /= h.sum(axis=1, keepdims=True)
        return h, cmeans, ccovs

    def conditional_mean(self, x) -> np.ndarray:
        h, m, _ = self.conditional(x)
        return np.einsum("bk,bkd->bd", h, m)


def _gauss_logpdf(x: np.ndarray, mu: np.ndarray, S: np.ndarray) -> np.ndarray:
    L = np.linalg.cholesky(S)
    sol = np.linalg.solve(L, (x - mu).T)
    return -0.5 * (np.sum(sol ** 2, axis=0) + 2 * np.sum(np.log(np.diag(L))) + len(mu) * np.log(2 * np.pi))


def _check_covariance(k: int, S: np.ndarray, max_cond: float) -> None:
    cond = np.linalg.cond(S)
    if not np.isfinite(cond) or cond > max_cond:
        raise SingularCovarianceError(
            f"component {k} covariance is singular (condition number {cond:.3g}); "
            "the flattened history is too long for the available data")


def gmr_fit_joint(data: np.ndarray, n_in: int, K: int = 8, seed: int = 0, max_iter: int = 200,
                  tol: float = 1e-8, ridge: float = 1e-6, max_cond: float = 1e12) -> GMRModel:
    """EM for a K-component full-covariance mixture.

    Covariances carry a fixed penalty -0.5 * tr(Psi Sigma_k^{-1}) with
    Psi = ridge * N / K * I, which gives Sigma_k = (S_k + Psi) / N_k.  The
    tracked objective (log-likelihood plus that penalty) cannot decrease
    between iterations.
    """
    X = np.asarray(data, dtype=np.float64)
    N, D = X.shape
    if K < 1 or K > N:
        raise ValueError(f"K must be in [1, {N}]")
    rng = np.random.default_rng(seed)
    psi = ridge * N / K * np.eye(D)
    means = X[rng.choice(N, size=K, replace=False)].copy()
    cov0 = np.cov(X, rowvar=False).reshape(D, D) + ridge * np.eye(D)
    _check_covariance(0, cov0, max_cond)
    covs = np.repeat(cov0[None], K, axis=0)
    weights = np.full(K, 1.0 / K)
    history: list[float] = []
    for it in range(max_iter):
        logp = np.stack([np.log(weights[k]) + _gauss_logpdf(X, means[k], covs[k]) for k in range(K)], axis=1)
        top = logp.max(axis=1, keepdims=True)
        lse = top[:, 0] + np.log(np.exp(logp - top).sum(axis=1))
        penalty = -0.5 * sum(np.trace(np.linalg.solve(covs[k], psi)) for k in range(K))
        history.append(float(lse.sum() + penalty))
        if it > 0 and abs(history[-1] - history[-2]) <= tol * abs(history[-2]):
            break
        resp = np.exp(logp - lse[:, None])
        Nk = resp.sum(axis=0) + 1e-300
        weights = Nk / N
        means = (resp.T @ X) / Nk[:, None]
        for k in range(K):
            diff = X - means[k]
            covs[k] = ((resp[:, k, None] * diff).T @ diff + psi) / Nk[k]
            covs[k] = 0.5 * (covs[k] + covs[k].T)
            _check_covariance(k, covs[k], max_cond)
    return GMRModel(weights, means, covs, n_in, history)


def gmr_fit(pairs: PairSet, K: int = 8, seed: int = 0, **kw) -> GMRModel:
    """Fit the joint of flattened history windows and actions."""
    Xin = pairs.histories.reshape(len(pairs), -1)
    return gmr_fit_joint(np.hstack([Xin, pairs.actions]), Xin.shape[1], K, seed, **kw)


def gmr_sample(model: GMRModel, history, rng: np.random.Generator) -> np.ndarray:
    """Draw actions from the conditional mixture; ``history`` is (B, L, d) or (L, d)."""
    history = np.asarray(history, dtype=np.float64)
    single = history.ndim == 2
    x = history.reshape(1 if single else len(history), -1)
    h, m, C = model.conditional(x)
    out = np.empty((len(x), m.shape[2]))
    for b in range(len(x)):
        k = rng.choice(model.K, p=h[b])
        L = np.linalg.cholesky(C[k] + 1e-12 * np.eye(len(C[k])))
        out[b] = m[b, k] + L @ rng.standard_normal(m.shape[2])
    return out[0] if single else out


class GMRPolicy:
    def __init__(self, model: GMRModel):
        self.model = model

    def sample(self, histories, rng):
        return gmr_sample(self.model, histories, rng)


# ---------------------------------------------------------------------------
# perturbed networks


@dataclass
class PNetConfig:
    variant: str = "mlp"  # "mlp" or "lstm"
    steps: int = 11  # history window length T_h + 1
    state_dim: int = 2
    action_dim: int = 2
    hidden: int = 128
    layers: int = 5
    sigma_in: float = 0.1


class PerturbedNet:
    kind = "pnet"

    def __init__(self, cfg: PNetConfig, seed: int = 0):
        if cfg.variant not in ("mlp", "lstm"):
            raise ValueError(f"variant must be 'mlp' or 'lstm', got {cfg.variant!r}")
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.normalizer = Normalizer(np.zeros(cfg.state_dim), np.ones(cfg.state_dim),
                                     np.zeros(cfg.action_dim), np.ones(cfg.action_dim))
        self.lstm = None
        if cfg.variant == "lstm":
            self.lstm = LSTMLayer(cfg.state_dim, cfg.hidden, rng, "pnet/lstm")
            width, n_dense = cfg.hidden, cfg.layers - 1
        else:
            width, n_dense = cfg.steps * cfg.state_dim, cfg.layers
        self.fc = []
        for k in range(n_dense):
            self.fc.append(Dense(width, cfg.hidden, rng, f"pnet/fc{k}"))
            width = cfg.hidden
        self.out = Dense(width, cfg.action_dim, rng, "pnet/out")

    def params(self) -> list[Tensor]:
        ps = [] if self.lstm is None else self.lstm.params()
        return ps + [p for layer in (*self.fc, self.out) for p in layer.params()]

    def forward(self, Xn) -> Tensor:
        """Normalized action for normalized (already perturbed) histories (B, L, d)."""
        Xn = dc.const(Xn)
        if self.lstm is not None:
            h = self.lstm.run(Xn)
        else:
            h = dc.reshape(Xn, (Xn.shape[0], Xn.shape[1] * Xn.shape[2]))
        for layer in self.fc:
            h = dc.relu(layer(h))
        return self.out(h)

    def perturb(self, Xn: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if self.cfg.sigma_in > 0:
            return Xn + self.cfg.sigma_in * rng.standard_normal(Xn.shape)
        return Xn

    def sample(self, histories, rng):
        Xn = self.perturb(self.normalizer.states(np.asarray(histories, dtype=np.float64)), rng)
        with dc.no_grad():
            a = self.forward(Xn).data
        return self.normalizer.actions_inv(a)

    # checkpoint protocol
    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {p.name: p.data for p in self.params()}
        out.update(self.normalizer.arrays())
        return out

    def config_dict(self) -> dict:
        return asdict(self.cfg)

    @classmethod
    def from_state(cls, config: dict, arrays: dict) -> "PerturbedNet":
        net = cls(PNetConfig(**config))
        _fill_params(net.params(), arrays)
        net.normalizer = Normalizer.from_arrays(arrays)
        return net


@dataclass
class PNetTrainConfig:
    alpha: float = 1e-4
    iterations: int = 100_000
    batch_size: int = 64
    rho: float = 0.9
    eps: float = 1e-8
    log_every: int = 100
    divergence_threshold: float = 1e6
    seed: int = 0


class DivergenceError(FloatingPointError):
    pass


def pnet_train(net: PerturbedNet, pairs: PairSet, cfg: PNetTrainConfig,
               fit_normalizer: bool = True) -> list[tuple[int, float]]:
    """RMSProp on MSE with freshly perturbed inputs each draw; returns (iteration, loss) records."""
    if fit_normalizer:
        net.normalizer = Normalizer.fit(pairs.histories, pairs.actions)
    rng = np.random.default_rng(cfg.seed)
    params = net.params()
    rms = RMSPropState.zeros(sum(p.size for p in params))
    hyper = _RMSHyper(cfg.rho, cfg.eps)
    Xall = net.normalizer.states(pairs.histories)
    Yall = net.normalizer.actions(pairs.actions)
    records = []
    for it in range(1, cfg.iterations + 1):
        idx = rng.integers(0, len(pairs), size=cfg.batch_size)
        X = net.perturb(Xall[idx], rng)
        loss = dc.mean(dc.square(dc.sub(net.forward(X), Yall[idx])))
        g = dc.backward(loss, params).flat(params)
        gnorm = float(np.linalg.norm(g))
        if not np.isfinite(gnorm) or gnorm > cfg.divergence_threshold:
            raise DivergenceError(f"P-net training diverged at iteration {it}: |grad|={gnorm:.6g}")
        step = rms.precondition(g, hyper)
        off = 0
        for p in params:
            p.data = p.data - cfg.alpha * step[off:off + p.size].reshape(p.shape)
            off += p.size
        if it % cfg.log_every == 0 or it == cfg.iterations:
            records.append((it, loss.item()))
    return records


@dataclass
class _RMSHyper:
    rho: float
    eps: float


register_checkpoint_kind("pnet", PerturbedNet.from_state)
register_checkpoint_kind("gmr", GMRModel.from_state)
