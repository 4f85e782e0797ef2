"""Generator / discriminator networks (LSTM + fully connected stack).

Both networks read the condition sequence X = (x_{t-T_h}, ..., x_t) with
one LSTM layer.  The generator concatenates a fresh noise vector to every
condition vector before the LSTM and maps the final hidden state through
the FC stack to an action.  The discriminator encodes X alone and scores
``[h_T || action]``.

Networks operate in normalized units; :class:`Normalizer` converts raw
states/actions and travels with the checkpoint.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import diffcore as dc
from .diffcore import ShapeError, Tensor

CHECKPOINT_VERSION = 1
CHECKPOINT_FORMAT = "gantrack-checkpoint"
LOGIT_BOUND = 30.0


@dataclass(frozen=True)
class NetConfig:
    cond_dim: int = 2
    action_dim: int = 2
    hidden: int = 128
    fc_layers: int = 4
    fc_width: int = 64
    noise_dim: int = 16
    noise: str = "normal"  # "normal" -> N(0, I), "uniform" -> U[0, 1]


PROFILES = {
    "full": NetConfig(),
    "scaled": NetConfig(hidden=32, fc_layers=2, fc_width=32, noise_dim=8),
}


def profile(name: str, **overrides) -> NetConfig:
    try:
        base = PROFILES[name]
    except KeyError:
        raise ValueError(f"unknown network profile {name!r}; choose from {sorted(PROFILES)}") from None
    return NetConfig(**{**asdict(base), **overrides})


def _uniform(rng, shape, fan_in, name):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


class Dense:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, name: str):
        self.W = _uniform(rng, (n_in, n_out), n_in, f"{name}/W")
        self.b = _uniform(rng, (n_out,), n_in, f"{name}/b")

    def params(self) -> list[Tensor]:
        return [self.W, self.b]

    def __call__(self, x: Tensor) -> Tensor:
        return dc.add(dc.matmul(x, self.W), self.b)


class LSTMLayer:
    """Single LSTM layer; gate order along the 4H axis is (input, forget, cell, output)."""

    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator, name: str):
        self.n_in, self.hidden = n_in, hidden
        fan_in = n_in + hidden
        self.Wx = _uniform(rng, (n_in, 4 * hidden), fan_in, f"{name}/Wx")
        self.Wh = _uniform(rng, (hidden, 4 * hidden), fan_in, f"{name}/Wh")
        b = rng.uniform(-1.0 / np.sqrt(fan_in), 1.0 / np.sqrt(fan_in), size=4 * hidden)
        b[hidden:2 * hidden] = 1.0
        self.b = Tensor(b, requires_grad=True, name=f"{name}/b")

    def params(self) -> list[Tensor]:
        return [self.Wx, self.Wh, self.b]

    def run(self, X: Tensor) -> Tensor:
        """Final hidden state for a (B, T, n_in) sequence, zero initial state."""
        B, T, n_in = X.shape
        if n_in != self.n_in:
            raise ShapeError(f"LSTM expects feature size {self.n_in}, got {n_in}")
        H = self.hidden
        h = c = None
        for t in range(T):
            # constant inputs are sliced outside the graph; the adjoint of a
            # recorded slice would scatter into a full (B, T, 4H) array per step
            x_t = dc.Tensor(X.data[:, t]) if not X.requires_grad else dc.index(X, (slice(None), t))
            z = dc.add(dc.matmul(x_t, self.Wx), self.b)
            if h is not None:
                z = dc.add(z, dc.matmul(h, self.Wh))
            h, c = _gates(z, c, H)
        return h


def _gates(z: Tensor, c: Tensor | None, H: int) -> tuple[Tensor, Tensor]:
    i = dc.sigmoid(dc.index(z, (slice(None), slice(0, H))))
    g = dc.tanh(dc.index(z, (slice(None), slice(2 * H, 3 * H))))
    o = dc.sigmoid(dc.index(z, (slice(None), slice(3 * H, 4 * H))))
    c_new = dc.mul(i, g)
    if c is not None:
        f = dc.sigmoid(dc.index(z, (slice(None), slice(H, 2 * H))))
        c_new = dc.add(dc.mul(f, c), c_new)
    return dc.mul(o, dc.tanh(c_new)), c_new


def lstm_step(x, hidden, cell, params) -> tuple[Tensor, Tensor]:
    """One LSTM cell update.

    ``params`` is an :class:`LSTMLayer` or a ``(Wx, Wh, b)`` triple.
    """
    Wx, Wh, b = params.params() if isinstance(params, LSTMLayer) else params
    x, hidden, cell = dc.const(x), dc.const(hidden), dc.const(cell)
    H = Wh.shape[0]
    if Wx.shape[1] != 4 * H or Wh.shape != (H, 4 * H) or b.shape != (4 * H,):
        raise ShapeError(f"inconsistent LSTM parameter shapes {Wx.shape}, {Wh.shape}, {b.shape}")
    if x.shape[-1] != Wx.shape[0] or hidden.shape[-1] != H or cell.shape != hidden.shape:
        raise ShapeError(f"LSTM step shapes x={x.shape} h={hidden.shape} c={cell.shape} for hidden size {H}")
    z = dc.add(dc.add(dc.matmul(x, Wx), dc.matmul(hidden, Wh)), b)
    return _gates(z, cell, H)


def _fc_stack(n_in: int, cfg: NetConfig, n_out: int, rng, prefix: str) -> list[Dense]:
    layers, width = [], n_in
    for k in range(cfg.fc_layers):
        layers.append(Dense(width, cfg.fc_width, rng, f"{prefix}/fc{k}"))
        width = cfg.fc_width
    layers.append(Dense(width, n_out, rng, f"{prefix}/out"))
    return layers


def _run_fc(layers: list[Dense], h: Tensor) -> Tensor:
    for layer in layers[:-1]:
        h = dc.relu(layer(h))
    return layers[-1](h)


class GeneratorNet:
    def __init__(self, cfg: NetConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.lstm = LSTMLayer(cfg.cond_dim + cfg.noise_dim, cfg.hidden, rng, "gen/lstm")
        self.fc = _fc_stack(cfg.hidden, cfg, cfg.action_dim, rng, "gen")

    def params(self) -> list[Tensor]:
        return [*self.lstm.params(), *(p for layer in self.fc for p in layer.params())]

    def sample_noise(self, rng: np.random.Generator, batch: int, steps: int) -> np.ndarray:
        shape = (batch, steps, self.cfg.noise_dim)
        if self.cfg.noise == "uniform":
            return rng.uniform(0.0, 1.0, size=shape)
        return rng.standard_normal(shape)

    def __call__(self, X, Z) -> Tensor:
        return generate(self, X, Z)


class DiscriminatorNet:
    def __init__(self, cfg: NetConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.lstm = LSTMLayer(cfg.cond_dim, cfg.hidden, rng, "disc/lstm")
        self.fc = _fc_stack(cfg.hidden + cfg.action_dim, cfg, 1, rng, "disc")

    def params(self) -> list[Tensor]:
        return [*self.lstm.params(), *(p for layer in self.fc for p in layer.params())]

    def encode(self, X) -> Tensor:
        return self.lstm.run(dc.const(X))

    def score(self, h: Tensor, y) -> Tensor:
        """Probability that ``y`` is a real action, given the encoded condition ``h``."""
        y = dc.const(y)
        if y.ndim != 2 or y.shape[1] != self.cfg.action_dim:
            raise ShapeError(f"action sample must be (B, {self.cfg.action_dim}), got {y.shape}")
        logit = _run_fc(self.fc, dc.concat([h, y], axis=1))
        logit = dc.clip(dc.reshape(logit, (logit.shape[0],)), -LOGIT_BOUND, LOGIT_BOUND)
        return dc.sigmoid(logit)

    def __call__(self, X, y) -> Tensor:
        return discriminate(self, X, y)


def generate(gen: GeneratorNet, X, Z) -> Tensor:
    """Action sample for conditions X (B, T, cond_dim) and noise Z (B, T, noise_dim)."""
    X, Z = dc.const(X), dc.const(Z)
    if X.ndim != 3 or Z.ndim != 3:
        raise ShapeError(f"X and Z must be (B, T, features), got {X.shape} and {Z.shape}")
    if X.shape[:2] != Z.shape[:2]:
        raise ShapeError(f"condition and noise sequences disagree: {X.shape[:2]} vs {Z.shape[:2]}")
    if X.shape[2] != gen.cfg.cond_dim or Z.shape[2] != gen.cfg.noise_dim:
        raise ShapeError(f"feature sizes {X.shape[2]}/{Z.shape[2]} do not match "
                         f"{gen.cfg.cond_dim}/{gen.cfg.noise_dim}")
    h = gen.lstm.run(dc.concat([X, Z], axis=2))
    return _run_fc(gen.fc, h)


def discriminate(disc: DiscriminatorNet, X, y) -> Tensor:
    X = dc.const(X)
    if X.ndim != 3 or X.shape[2] != disc.cfg.cond_dim:
        raise ShapeError(f"condition sequence must be (B, T, {disc.cfg.cond_dim}), got {X.shape}")
    return disc.score(disc.encode(X), y)


@dataclass
class Normalizer:
    """Affine maps raw -> network units for states and actions."""

    state_mean: np.ndarray = field(default_factory=lambda: np.zeros(2))
    state_scale: np.ndarray = field(default_factory=lambda: np.ones(2))
    action_mean: np.ndarray = field(default_factory=lambda: np.zeros(2))
    action_scale: np.ndarray = field(default_factory=lambda: np.ones(2))

    @classmethod
    def fit(cls, histories: np.ndarray, actions: np.ndarray) -> "Normalizer":
        """Scale states and actions to roughly [-1, 1] from dataset extremes."""
        s = histories.reshape(-1, histories.shape[-1])
        lo, hi = s.min(axis=0), s.max(axis=0)
        alo, ahi = actions.min(axis=0), actions.max(axis=0)
        return cls(state_mean=(hi + lo) / 2, state_scale=np.maximum((hi - lo) / 2, 1e-8),
                   action_mean=(ahi + alo) / 2, action_scale=np.maximum((ahi - alo) / 2, 1e-8))

    def states(self, s):
        return (np.asarray(s) - self.state_mean) / self.state_scale

    def actions(self, a):
        return (np.asarray(a) - self.action_mean) / self.action_scale

    def actions_inv(self, a):
        return np.asarray(a) * self.action_scale + self.action_mean

    def arrays(self) -> dict[str, np.ndarray]:
        return {f"normalizer/{k}": np.asarray(v, dtype=np.float64) for k, v in asdict(self).items()}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "Normalizer":
        return cls(**{k: arrays[f"normalizer/{k}"] for k in ("state_mean", "state_scale",
                                                                "action_mean", "action_scale")})


class GANModel:
    """Generator, discriminator and the normalizer shared by both."""

    kind = "gan"

    def __init__(self, cfg: NetConfig, seed: int = 0, normalizer: Normalizer | None = None):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.gen = GeneratorNet(cfg, rng)
        self.disc = DiscriminatorNet(cfg, rng)
        self.normalizer = normalizer or Normalizer(np.zeros(cfg.cond_dim), np.ones(cfg.cond_dim),
                                                   np.zeros(cfg.action_dim), np.ones(cfg.action_dim))

    def player_params(self) -> dc.PlayerParams:
        return dc.PlayerParams(self.disc.params(), self.gen.params())

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {p.name: p.data for p in self.disc.params() + self.gen.params()}
        out.update(self.normalizer.arrays())
        return out

    def config_dict(self) -> dict:
        return asdict(self.cfg)

    @classmethod
    def from_state(cls, config: dict, arrays: dict[str, np.ndarray]) -> "GANModel":
        model = cls(NetConfig(**config))
        _fill_params(model.disc.params() + model.gen.params(), arrays)
        model.normalizer = Normalizer.from_arrays(arrays)
        return model

    def policy(self) -> "GeneratorPolicy":
        return GeneratorPolicy(self)


class GeneratorPolicy:
    """Raw-unit sampling interface used by rollouts and the particle filter."""

    def __init__(self, model: GANModel):
        self.model = model

    def sample(self, histories: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        histories = np.asarray(histories, dtype=np.float64)
        B, T, _ = histories.shape
        gen, norm = self.model.gen, self.model.normalizer
        Z = gen.sample_noise(rng, B, T)
        with dc.no_grad():
            a = generate(gen, norm.states(histories), Z).data
        return norm.actions_inv(a)


def _fill_params(params: list[Tensor], arrays: dict[str, np.ndarray]) -> None:
    for p in params:
        if p.name not in arrays:
            raise CheckpointShapeError(f"checkpoint lacks parameter {p.name!r}")
        a = arrays[p.name]
        if a.shape != p.shape:
            raise CheckpointShapeError(f"parameter {p.name!r}: checkpoint shape {a.shape}, model shape {p.shape}")
        p.data = a.copy()


# ---------------------------------------------------------------------------
# checkpoint container


class CheckpointError(Exception):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


_KINDS: dict[str, Callable[[dict, dict], object]] = {"gan": GANModel.from_state}


def register_checkpoint_kind(kind: str, loader: Callable[[dict, dict], object]) -> None:
    _KINDS[kind] = loader


def _digest(entries: list[dict]) -> str:
    h = hashlib.sha256()
    for e in entries:
        h.update(e["name"].encode())
        h.update(np.asarray(e["shape"], dtype=np.int64).tobytes())
        h.update(np.asarray(e["values"], dtype="<f8").tobytes())
    return h.hexdigest()


def save_checkpoint(model, path, metadata: dict | None = None) -> Path:
    """Write ``model`` as a versioned JSON container; atomic via rename."""
    entries = [{"name": k, "shape": list(v.shape), "values": np.asarray(v, dtype=np.float64).reshape(-1).tolist()}
               for k, v in model.named_arrays().items()]
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": model.kind,
        "config": model.config_dict(),
        "metadata": metadata or {},
        "arrays": entries,
        "sha256": _digest(entries),
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(doc, fh)
    os.replace(tmp, path)
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Validated document and its named arrays."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable checkpoint ({exc})") from None
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise CorruptCheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {doc.get('version')!r}, "
                                     f"this library reads version {CHECKPOINT_VERSION}")
    entries = doc.get("arrays")
    if not isinstance(entries, list) or doc.get("sha256") != _digest(entries):
        raise CorruptCheckpointError(f"{path}: array payload failed integrity check")
    arrays = {}
    for e in entries:
        vals = np.asarray(e["values"], dtype=np.float64)
        if vals.size != int(np.prod(e["shape"])):
            raise CheckpointShapeError(f"{path}: entry {e['name']!r} has {vals.size} values for shape {e['shape']}")
        arrays[e["name"]] = vals.reshape(e["shape"])
    return doc, arrays


def load_checkpoint(path):
    doc, arrays = read_checkpoint(path)
    loader = _KINDS.get(doc.get("kind"))
    if loader is None:
        raise CorruptCheckpointError(f"{path}: unknown model kind {doc.get('kind')!r}")
    model = loader(doc["config"], arrays)
    model.metadata = doc.get("metadata", {})
    return model
