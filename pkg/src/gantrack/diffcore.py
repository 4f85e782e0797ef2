"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every backward rule is written in terms of the same recorded primitives as
the forward pass, so gradients computed with ``create_graph=True`` are
themselves differentiable (double backprop).  That is what makes
``grad_norm_grad`` exact rather than a finite-difference approximation.

The graph is dynamic: each operation links its output to its parents.  A
:class:`ComputationRecord` can additionally be opened to keep an ordered,
replayable log of the primitives executed inside it.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

LOG_FLOOR = 1e-12

__all__ = [
    "Tensor", "ComputationRecord", "GradientMap", "PlayerParams",
    "ShapeError", "GradError", "NonDifferentiableError",
    "tensor", "const", "no_grad", "enable_grad", "is_grad_enabled",
    "matmul", "add", "sub", "neg", "mul", "div", "concat", "index", "scatter",
    "tanh", "sigmoid", "relu", "log", "exp", "square", "sum", "mean",
    "transpose", "reshape", "expand", "clip", "detach", "floor",
    "trace", "forward", "backward", "grad", "grad_norm_grad",
]


class ShapeError(ValueError):
    """Raised when an operation receives incompatible shapes.

    ``index`` is the position of the offending operation in the active
    record (or in the record being replayed).
    """

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class GradError(ValueError):
    pass


class NonDifferentiableError(ValueError):
    pass


class _State(threading.local):
    def __init__(self):
        self.grad_enabled = True
        self.records: list = []
        self.needed: set | None = None


_state = _State()


def _tls() -> _State:
    return _state


def is_grad_enabled() -> bool:
    return _tls().grad_enabled


@contextmanager
def _grad_mode(enabled: bool):
    st = _tls()
    prev = st.grad_enabled
    st.grad_enabled = enabled
    try:
        yield
    finally:
        st.grad_enabled = prev


def no_grad():
    """Context manager disabling graph construction (inference)."""
    return _grad_mode(False)


def enable_grad():
    return _grad_mode(True)


class Tensor:
    """A float64 array that remembers how it was computed."""

    __slots__ = ("data", "requires_grad", "_parents", "_op", "_attrs", "node_id", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._op: str | None = None
        self._attrs: dict = {}
        self.node_id: int | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._op is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        extra = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}{extra}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, o): return matmul(self, o)
    def __getitem__(self, key): return index(self, key)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims=False): return sum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def const(data) -> Tensor:
    return data if type(data) is Tensor else Tensor(data)


# ---------------------------------------------------------------------------
# computation record


@dataclass
class _Node:
    op: str  # primitive name, or "leaf" / "input"
    parents: tuple[int, ...]
    attrs: dict
    tensor: Tensor


@dataclass
class ComputationRecord:
    """Ordered log of the primitives executed while the record is active.

    Leaves (parameters, constants) are captured by reference the first time
    an operation consumes them.  Inputs declared through :func:`trace` can be
    substituted on :func:`forward` replay.
    """

    nodes: list[_Node] = field(default_factory=list)
    inputs: list[int] = field(default_factory=list)
    output: int | None = None
    _ids: dict[int, int] = field(default_factory=dict, repr=False)

    def __enter__(self):
        _tls().records.append(self)
        return self

    def __exit__(self, *exc):
        _tls().records.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    @property
    def input_shapes(self) -> list[tuple[int, ...]]:
        return [self.nodes[i].tensor.shape for i in self.inputs]

    @property
    def ops(self) -> list[str]:
        return [n.op for n in self.nodes if n.op not in ("leaf", "input")]

    def _ref(self, t: Tensor, kind: str = "leaf") -> int:
        k = id(t)
        idx = self._ids.get(k)
        if idx is None:
            idx = len(self.nodes)
            self.nodes.append(_Node(kind, (), {}, t))
            self._ids[k] = idx
        return idx

    def _append(self, op: str, parents: Sequence[Tensor], attrs: dict, out: Tensor) -> int:
        pids = tuple(self._ref(p) for p in parents)
        idx = len(self.nodes)
        self.nodes.append(_Node(op, pids, attrs, out))
        self._ids[id(out)] = idx
        return idx

    def topological_ok(self) -> bool:
        """Every node's parents precede it; reverse order is a valid backward order."""
        return all(p < i for i, n in enumerate(self.nodes) for p in n.parents)


def _active_record() -> ComputationRecord | None:
    recs = _tls().records
    return recs[-1] if recs else None


# ---------------------------------------------------------------------------
# primitive registry


@dataclass(frozen=True)
class _OpDef:
    forward: Callable
    backward: Callable | None
    differentiable: bool = True


_OPS: dict[str, _OpDef] = {}


def _register(name, forward, backward=None, differentiable=True):
    _OPS[name] = _OpDef(forward, backward, differentiable)


def _wrap(data: np.ndarray) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out._parents = ()
    out._op = None
    out._attrs = {}
    out.node_id = None
    out.name = None
    return out


def _apply(name: str, parents: Sequence[Tensor], **attrs) -> Tensor:
    opdef = _OPS[name]
    st = _state
    try:
        data = opdef.forward(*[p.data for p in parents], **attrs)
    except ValueError as exc:
        idx = len(st.records[-1].nodes) if st.records else None
        raise ShapeError(f"operation #{idx} ({name}): {exc}", index=idx) from None
    out = _wrap(data if type(data) is np.ndarray and data.dtype == np.float64
                else np.asarray(data, dtype=np.float64))
    if st.grad_enabled:
        for p in parents:
            if p.requires_grad:
                out._parents = tuple(parents)
                out._op = name
                out._attrs = attrs
                out.requires_grad = opdef.differentiable
                if st.records:
                    out.node_id = st.records[-1]._append(name, parents, attrs, out)
                break
    return out


def _unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and g.shape[i + lead] != 1
    )
    out = sum(g, axis=axes) if axes else g
    return reshape(out, shape) if out.shape != shape else out


def _bin(a, b):
    return const(a), const(b)


def add(a, b) -> Tensor:
    a, b = _bin(a, b)
    return _apply("add", (a, b))


def sub(a, b) -> Tensor:
    a, b = _bin(a, b)
    return _apply("sub", (a, b))


def mul(a, b) -> Tensor:
    a, b = _bin(a, b)
    return _apply("mul", (a, b))


def div(a, b) -> Tensor:
    a, b = _bin(a, b)
    return _apply("div", (a, b))


def neg(a) -> Tensor:
    return _apply("neg", (const(a),))


def matmul(a, b) -> Tensor:
    a, b = _bin(a, b)
    if b.ndim == 1:
        return reshape(_apply("matmul", (a, reshape(b, (b.shape[0], 1)))), a.shape[:-1])
    return _apply("matmul", (a, b))


def transpose(a) -> Tensor:
    return _apply("transpose", (const(a),))


def reshape(a, shape) -> Tensor:
    return _apply("reshape", (const(a),), shape=tuple(shape))


def expand(a, shape) -> Tensor:
    return _apply("expand", (const(a),), shape=tuple(shape))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return _apply("sum", (const(a),), axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    return _apply("mean", (const(a),), axis=axis, keepdims=keepdims)


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    return _apply("concat", tuple(const(x) for x in xs), axis=axis)


def _norm_key(key):
    return key if isinstance(key, tuple) else (key,)


def index(a, key) -> Tensor:
    """Basic slicing / integer indexing (no fancy indexing)."""
    return _apply("index", (const(a),), key=_norm_key(key))


def scatter(g, key, shape) -> Tensor:
    """Adjoint of :func:`index`: place ``g`` into zeros of ``shape`` at ``key``."""
    return _apply("scatter", (const(g),), key=_norm_key(key), shape=tuple(shape))


def tanh(a) -> Tensor:
    return _apply("tanh", (const(a),))


def sigmoid(a) -> Tensor:
    return _apply("sigmoid", (const(a),))


def relu(a) -> Tensor:
    return _apply("relu", (const(a),))


def exp(a) -> Tensor:
    return _apply("exp", (const(a),))


def square(a) -> Tensor:
    return _apply("square", (const(a),))


def clip(a, lo: float, hi: float) -> Tensor:
    return _apply("clip", (const(a),), lo=lo, hi=hi)


def log(a) -> Tensor:
    """Natural log of ``max(a, 1e-12)``."""
    return _apply("log", (clip(a, LOG_FLOOR, np.inf),))


def detach(a) -> Tensor:
    """Value copy that blocks gradient flow; not allowed inside a double-backprop builder."""
    return _apply("detach", (const(a),))


def floor(a) -> Tensor:
    return _apply("floor", (const(a),))


def _sigmoid_np(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _matmul_fwd(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    return a @ b


def _reshape_fwd(a, shape):
    if int(np.prod(shape)) != a.size:
        raise ValueError(f"cannot reshape {a.shape} into {shape}")
    return a.reshape(shape)


def _scatter_fwd(g, key, shape):
    out = np.zeros(shape)
    out[key] = g
    return out


def _concat_fwd(*xs, axis):
    return np.concatenate(xs, axis=axis)


def _concat_bwd(g, out, *xs, axis):
    ax = axis % out.ndim
    grads, start = [], 0
    for x in xs:
        stop = start + x.shape[ax]
        if _wants(x):
            key = (slice(None),) * ax + (slice(start, stop),)
            grads.append(index(g, key))
        else:
            grads.append(None)
        start = stop
    return grads


def _sum_bwd(g, out, a, axis, keepdims):
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        kshape = list(a.shape)
        for ax in axes:
            kshape[ax % a.ndim] = 1
        g = reshape(g, tuple(kshape))
    elif axis is None and g.shape != (1,) * a.ndim:
        g = reshape(g, (1,) * a.ndim)
    return (expand(g, a.shape),)


def _mean_bwd(g, out, a, axis, keepdims):
    (gs,) = _sum_bwd(g, out, a, axis, keepdims)
    return (mul(gs, 1.0 / (a.size / max(out.size, 1))),)


def _wants(p: Tensor) -> bool:
    needed = _state.needed
    return p.requires_grad and (needed is None or id(p) in needed)


def _ng(p, fn):
    return fn() if _wants(p) else None


_register("add", np.add,
          lambda g, o, a, b: (_ng(a, lambda: _unbroadcast(g, a.shape)),
                              _ng(b, lambda: _unbroadcast(g, b.shape))))
_register("sub", np.subtract,
          lambda g, o, a, b: (_ng(a, lambda: _unbroadcast(g, a.shape)),
                              _ng(b, lambda: _unbroadcast(neg(g), b.shape))))
_register("mul", np.multiply,
          lambda g, o, a, b: (_ng(a, lambda: _unbroadcast(mul(g, b), a.shape)),
                              _ng(b, lambda: _unbroadcast(mul(g, a), b.shape))))
_register("div", np.divide,
          lambda g, o, a, b: (_ng(a, lambda: _unbroadcast(div(g, b), a.shape)),
                              _ng(b, lambda: _unbroadcast(neg(div(mul(g, a), square(b))), b.shape))))
_register("neg", np.negative, lambda g, o, a: (neg(g),))
_register("matmul", _matmul_fwd,
          lambda g, o, a, b: (_ng(a, lambda: matmul(g, transpose(b))),
                              _ng(b, lambda: matmul(transpose(a), g))))
_register("transpose", np.transpose, lambda g, o, a: (transpose(g),))
_register("reshape", _reshape_fwd, lambda g, o, a, shape: (reshape(g, a.shape),))
_register("expand", lambda a, shape: np.broadcast_to(a, shape).copy(),
          lambda g, o, a, shape: (_unbroadcast(g, a.shape),))
_register("sum", lambda a, axis, keepdims: np.asarray(np.sum(a, axis=axis, keepdims=keepdims)), _sum_bwd)
_register("mean", lambda a, axis, keepdims: np.asarray(np.mean(a, axis=axis, keepdims=keepdims)), _mean_bwd)
_register("concat", _concat_fwd, _concat_bwd)
_register("index", lambda a, key: np.array(a[key]),
          lambda g, o, a, key: (scatter(g, key, a.shape),))
_register("scatter", _scatter_fwd, lambda g, o, a, key, shape: (index(g, key),))
_register("tanh", np.tanh, lambda g, o, a: (mul(g, sub(1.0, square(o))),))
_register("sigmoid", _sigmoid_np, lambda g, o, a: (mul(g, mul(o, sub(1.0, o))),))
_register("relu", lambda a: np.maximum(a, 0.0),
          lambda g, o, a: (mul(g, Tensor((a.data > 0).astype(np.float64))),))
_register("exp", np.exp, lambda g, o, a: (mul(g, o),))
_register("square", np.square, lambda g, o, a: (mul(g, mul(a, 2.0)),))
_register("clip", lambda a, lo, hi: np.clip(a, lo, hi),
          lambda g, o, a, lo, hi: (mul(g, Tensor(((a.data >= lo) & (a.data <= hi)).astype(np.float64))),))
_register("log", np.log, lambda g, o, a: (div(g, a),))
_register("detach", np.copy, None, differentiable=False)
_register("floor", np.floor, None, differentiable=False)


# ---------------------------------------------------------------------------
# tracing and replay


def trace(fn: Callable[..., Tensor], *example_inputs) -> ComputationRecord:
    """Run ``fn`` on declared inputs and keep the record for later replay."""
    rec = ComputationRecord()
    ins = [Tensor(x.data if isinstance(x, Tensor) else x, requires_grad=True) for x in example_inputs]
    with rec:
        for t in ins:
            rec.inputs.append(rec._ref(t, kind="input"))
        out = fn(*ins)
    if id(out) not in rec._ids:
        raise GradError("traced function output is not connected to the record")
    rec.output = rec._ids[id(out)]
    return rec


def forward(record: ComputationRecord, inputs: Sequence) -> Tensor:
    """Replay ``record`` on new ``inputs``.

    The replayed primitives are executed through the normal dispatch, so the
    result can be differentiated (and extends any record active at the call).
    """
    if len(inputs) != len(record.inputs):
        raise ShapeError(f"expected {len(record.inputs)} inputs, got {len(inputs)}", index=None)
    ins = [const(x) for x in inputs]
    for k, (t, want) in enumerate(zip(ins, record.input_shapes)):
        if t.shape != want:
            idx = record.inputs[k]
            consumer = next((i for i, n in enumerate(record.nodes) if idx in n.parents), idx)
            raise ShapeError(f"operation #{consumer}: input {k} has shape {t.shape}, declared {want}",
                             index=consumer)
    env: dict[int, Tensor] = dict(zip(record.inputs, ins))
    for i, node in enumerate(record.nodes):
        if node.op == "input":
            continue
        if node.op == "leaf":
            env[i] = node.tensor
            continue
        try:
            env[i] = _apply(node.op, [env[p] for p in node.parents], **node.attrs)
        except ShapeError as exc:
            raise ShapeError(f"operation #{i} ({node.op}): {exc}", index=i) from None
    return env[record.output]


# ---------------------------------------------------------------------------
# backward


class GradientMap(dict):
    """Parameter tensor -> gradient tensor of the same shape."""

    def flat(self, params: Iterable[Tensor] | None = None) -> np.ndarray:
        keys = list(self.keys()) if params is None else list(params)
        if not keys:
            return np.zeros(0)
        return np.concatenate([self[p].data.reshape(-1) for p in keys])


def _toposort(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, wrt: Iterable[Tensor], create_graph: bool = False) -> GradientMap:
    """Reverse-mode gradients of scalar ``loss`` with respect to ``wrt``.

    Parameters not reachable from ``loss`` receive zero gradients.  With
    ``create_graph`` the returned gradients are graph nodes themselves.
    """
    wrt = list(wrt)
    if loss.size != 1:
        raise GradError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, Tensor] = {}
    if loss.requires_grad:
        order = _toposort(loss)
        # only nodes lying on a path to some requested tensor need adjoints
        needed = {id(w) for w in wrt}
        for node in order:
            if any(id(p) in needed for p in node._parents):
                needed.add(id(node))
        grads[id(loss)] = Tensor(np.ones_like(loss.data))
        st = _tls()
        with _grad_mode(create_graph):
            for node in reversed(order):
                g = grads.get(id(node))
                if g is None or node._op is None or id(node) not in needed:
                    continue
                opdef = _OPS[node._op]
                st.needed = needed
                try:
                    pgrads = opdef.backward(g, node, *node._parents, **node._attrs)
                finally:
                    st.needed = None
                for p, gp in zip(node._parents, pgrads):
                    if gp is None or id(p) not in needed:
                        continue
                    k = id(p)
                    prev = grads.get(k)
                    grads[k] = gp if prev is None else add(prev, gp)
    out = GradientMap()
    for w in wrt:
        g = grads.get(id(w))
        out[w] = g if g is not None else Tensor(np.zeros_like(w.data))
    return out


def grad(loss: Tensor, wrt: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    gm = backward(loss, wrt, create_graph=create_graph)
    return [gm[w] for w in wrt]


# ---------------------------------------------------------------------------
# two-player parameters and second-order helper


@dataclass
class PlayerParams:
    """Discriminator (theta) and generator (phi) parameters; x = (theta, phi)."""

    disc: list[Tensor]
    gen: list[Tensor]

    def all(self) -> list[Tensor]:
        return [*self.disc, *self.gen]

    @property
    def sizes(self) -> tuple[int, int]:
        return (int(np.sum([p.size for p in self.disc])), int(np.sum([p.size for p in self.gen])))

    @property
    def dim(self) -> int:
        return sum_sizes(self.all())

    def flat(self) -> np.ndarray:
        ps = self.all()
        return np.concatenate([p.data.reshape(-1) for p in ps]) if ps else np.zeros(0)

    def assign_flat(self, x: np.ndarray) -> None:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.dim,):
            raise ShapeError(f"state vector has shape {x.shape}, expected ({self.dim},)")
        off = 0
        for p in self.all():
            n = p.size
            p.data = x[off:off + n].reshape(p.shape).copy()
            off += n


def sum_sizes(ps: Iterable[Tensor]) -> int:
    return int(np.sum([p.size for p in ps], dtype=np.int64))


def _find_nondifferentiable(roots: Sequence[Tensor]) -> str | None:
    seen, stack = set(), list(roots)
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t._op is not None and not _OPS[t._op].differentiable:
            return t._op
        stack.extend(t._parents)
    return None


def grad_norm_grad(v_builder: Callable[[PlayerParams], Sequence[Tensor]],
                   params: PlayerParams) -> GradientMap:
    """Gradient of r(x) = 0.5 * ||v(x)||^2 over both players, i.e. H(x)^T v(x).

    ``v_builder`` must assemble v from recorded primitives, typically via
    ``backward(..., create_graph=True)``.
    """
    v = list(v_builder(params))
    bad = _find_nondifferentiable(v)
    if bad is not None:
        raise NonDifferentiableError(f"gradient field uses non-differentiable primitive '{bad}'")
    r = None
    for piece in v:
        term = sum(square(piece))
        r = term if r is None else add(r, term)
    if r is None:
        return backward(Tensor(0.0), params.all())
    return backward(mul(r, 0.5), params.all())
