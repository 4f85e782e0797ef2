import threading

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gantrack import diffcore as dc
from gantrack.diffcore import Tensor

from conftest import central_diff, rel_err


def _param(x):
    return Tensor(np.array(x, dtype=np.float64), requires_grad=True)


def _scalar_grad(fn, x):
    p = _param(x)
    return dc.backward(dc.sum(fn(p)), [p])[p].data


# -- forward examples -------------------------------------------------------

def test_square_three():
    assert dc.square(Tensor(3.0)).item() == 9.0


def test_sigmoid_zero():
    assert dc.sigmoid(Tensor(0.0)).item() == 0.5


@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=2))
def test_matmul_identity(v):
    out = dc.matmul(Tensor(np.eye(2)), Tensor(np.array(v)))
    assert np.array_equal(out.data.reshape(-1), np.array(v))


def test_log_is_clamped():
    assert np.isfinite(dc.log(Tensor(0.0)).item())
    assert dc.log(Tensor(0.0)).item() == pytest.approx(np.log(1e-12))


# -- backward examples ------------------------------------------------------

def test_power_rule():
    assert _scalar_grad(dc.square, 3.0) == pytest.approx(6.0)


def test_sigmoid_derivative_at_zero():
    assert _scalar_grad(dc.sigmoid, 0.0) == pytest.approx(0.25)


def test_non_scalar_loss_rejected():
    p = _param([1.0, 2.0])
    with pytest.raises(dc.GradError):
        dc.backward(dc.square(p), [p])


def test_unreachable_param_gets_zero():
    p, q = _param([1.0, 2.0]), _param([[3.0]])
    g = dc.backward(dc.sum(dc.square(p)), [p, q])
    assert set(g) == {p, q}
    assert np.array_equal(g[q].data, np.zeros((1, 1)))
    assert g[q].shape == q.shape


def test_two_layer_net_matches_finite_differences(rng):
    X = rng.normal(size=(5, 3))
    W1, b1 = rng.normal(size=(3, 4)), rng.normal(size=4)
    W2 = rng.normal(size=(4, 1))

    def loss_np(w1):
        h = np.tanh(X @ w1 + b1)
        return float(np.mean((h @ W2) ** 2))

    p = _param(W1)
    loss = dc.mean(dc.square(dc.matmul(dc.tanh(dc.add(dc.matmul(Tensor(X), p), b1)), W2)))
    g = dc.backward(loss, [p])[p].data
    assert rel_err(g, central_diff(loss_np, W1)) < 1e-4


# -- primitive property sweep -----------------------------------------------

UNARY = {
    "tanh": (dc.tanh, np.tanh),
    "sigmoid": (dc.sigmoid, lambda x: 1 / (1 + np.exp(-x))),
    "exp": (dc.exp, np.exp),
    "square": (dc.square, np.square),
    "neg": (dc.neg, np.negative),
    "log": (lambda t: dc.log(dc.add(dc.square(t), 0.5)), lambda x: np.log(x ** 2 + 0.5)),
    "relu": (dc.relu, lambda x: np.maximum(x, 0)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_primitive_gradients(name):
    f_dc, f_np = UNARY[name]
    rng = np.random.default_rng(7)
    for _ in range(100):
        x = rng.uniform(-2, 2, size=(3,))
        if name == "relu":
            x = np.where(np.abs(x) < 1e-3, 0.5, x)  # kink
        g = _scalar_grad(f_dc, x)
        assert rel_err(g, central_diff(lambda y: float(np.sum(f_np(y))), x)) < 1e-4


BINARY = {
    "add": (dc.add, np.add),
    "sub": (dc.sub, np.subtract),
    "mul": (dc.mul, np.multiply),
    "div": (lambda a, b: dc.div(a, dc.add(dc.square(b), 1.0)), lambda a, b: a / (b ** 2 + 1.0)),
    "matmul": (dc.matmul, np.matmul),
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_primitive_gradients(name):
    f_dc, f_np = BINARY[name]
    rng = np.random.default_rng(11)
    for _ in range(100):
        sa, sb = ((2, 3), (3, 2)) if name == "matmul" else ((2, 3), (2, 3))
        a, b = rng.uniform(-2, 2, sa), rng.uniform(-2, 2, sb)
        pa, pb = _param(a), _param(b)
        g = dc.backward(dc.sum(f_dc(pa, pb)), [pa, pb])
        assert rel_err(g[pa].data, central_diff(lambda x: float(np.sum(f_np(x, b))), a)) < 1e-4
        assert rel_err(g[pb].data, central_diff(lambda x: float(np.sum(f_np(a, x))), b)) < 1e-4


def test_structural_primitive_gradients():
    rng = np.random.default_rng(3)
    w = rng.normal(size=(2, 3, 4))
    for _ in range(100):
        x = rng.uniform(-2, 2, size=(2, 3))
        y = rng.uniform(-2, 2, size=(2, 2))
        checks = [
            (lambda t: dc.mul(dc.reshape(t, (3, 2)), w[0, :, :2]), lambda v: v.reshape(3, 2) * w[0, :, :2]),
            (lambda t: dc.mul(dc.transpose(t), w[0, :, :2]), lambda v: v.T * w[0, :, :2]),
            (lambda t: dc.mul(dc.index(t, (slice(None), slice(1, 3))), y), lambda v: v[:, 1:3] * y),
            (lambda t: dc.square(dc.sum(t, axis=1)), lambda v: np.sum(v, axis=1) ** 2),
            (lambda t: dc.square(dc.mean(t, axis=0)), lambda v: np.mean(v, axis=0) ** 2),
            (lambda t: dc.mul(dc.concat([t, dc.square(t)], axis=1), w[:, :, :2].reshape(2, 6)[:, :6]),
             lambda v: np.concatenate([v, v ** 2], axis=1) * w[:, :, :2].reshape(2, 6)),
            (lambda t: dc.mul(dc.expand(dc.sum(t, axis=0, keepdims=True), (4, 3)), w[0].T),
             lambda v: np.broadcast_to(v.sum(0, keepdims=True), (4, 3)) * w[0].T),
        ]
        for f_dc, f_np in checks:
            g = _scalar_grad(f_dc, x)
            assert rel_err(g, central_diff(lambda v: float(np.sum(f_np(v))), x)) < 1e-4


# -- higher order -----------------------------------------------------------

@given(st.floats(-3, 3))
def test_second_derivative_of_cube(x):
    p = _param(x)
    (g,) = dc.grad(dc.mul(dc.square(p), p), [p], create_graph=True)
    (h,) = dc.grad(g, [p])
    assert abs(h.item() - 6 * x) <= 1e-10 * max(1.0, abs(6 * x))


@given(st.floats(-10, 10), st.floats(-10, 10))
def test_grad_norm_grad_bilinear_exact(theta, phi):
    pp = dc.PlayerParams([_param([theta])], [_param([phi])])

    def v_builder(p):
        (th,), (ph,) = p.disc, p.gen
        f = dc.sum(dc.mul(th, ph))
        g_th = dc.backward(f, [th], create_graph=True)[th]
        g_ph = dc.backward(f, [ph], create_graph=True)[ph]
        return [g_th, dc.neg(g_ph)]

    out = dc.grad_norm_grad(v_builder, pp).flat(pp.all())
    assert np.allclose(out, [theta, phi], rtol=0, atol=1e-12)


def test_grad_norm_grad_at_two_three():
    pp = dc.PlayerParams([_param([2.0])], [_param([3.0])])

    def v_builder(p):
        (th,), (ph,) = p.disc, p.gen
        f = dc.sum(dc.mul(th, ph))
        return [dc.backward(f, [th], create_graph=True)[th], dc.neg(dc.backward(f, [ph], create_graph=True)[ph])]

    assert np.array_equal(dc.grad_norm_grad(v_builder, pp).flat(pp.all()), [2.0, 3.0])


def test_grad_norm_grad_constant_field_is_zero():
    pp = dc.PlayerParams([_param([2.0, 1.0])], [_param([3.0])])
    out = dc.grad_norm_grad(lambda p: [Tensor(np.array([1.0, -4.0])), Tensor(np.array([2.0]))], pp)
    assert np.array_equal(out.flat(pp.all()), np.zeros(3))


def test_grad_norm_grad_rejects_non_differentiable():
    pp = dc.PlayerParams([_param([2.0])], [_param([3.0])])
    with pytest.raises(dc.NonDifferentiableError):
        dc.grad_norm_grad(lambda p: [dc.floor(dc.mul(p.disc[0], p.gen[0]))], pp)


def test_grad_norm_grad_small_network_matches_finite_differences(rng):
    X = rng.normal(size=(6, 2))
    th0, ph0 = rng.normal(size=(2, 3)) * 0.7, rng.normal(size=(3, 1)) * 0.7

    def field(th_t, ph_t, create):
        out = dc.mean(dc.square(dc.matmul(dc.tanh(dc.matmul(Tensor(X), th_t)), ph_t)))
        other = dc.mean(dc.sigmoid(dc.matmul(dc.tanh(dc.matmul(Tensor(X), th_t)), ph_t)))
        return [dc.neg(dc.backward(out, [th_t], create_graph=create)[th_t]),
                dc.neg(dc.backward(other, [ph_t], create_graph=create)[ph_t])]

    def r_of(flat):
        th, ph = _param(flat[:6].reshape(2, 3)), _param(flat[6:].reshape(3, 1))
        v = field(th, ph, False)
        return 0.5 * sum(float(np.sum(p.data ** 2)) for p in v)

    pp = dc.PlayerParams([_param(th0)], [_param(ph0)])
    ana = dc.grad_norm_grad(lambda p: field(p.disc[0], p.gen[0], True), pp).flat(pp.all())
    x0 = np.concatenate([th0.ravel(), ph0.ravel()])
    eps = 1e-5
    for k in rng.choice(len(x0), size=5, replace=False):
        e = np.zeros_like(x0)
        e[k] = eps
        fd = (r_of(x0 + e) - r_of(x0 - e)) / (2 * eps)
        assert abs(ana[k] - fd) <= 1e-3 * max(abs(fd), 1e-6)


# -- records ----------------------------------------------------------------

def _net(x, w):
    return dc.sum(dc.tanh(dc.matmul(x, w)))


def test_trace_replay_is_bit_identical(rng):
    x, w = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    rec = dc.trace(_net, Tensor(x), Tensor(w))
    assert rec.topological_ok()
    a = dc.forward(rec, [x, w]).data
    b = dc.forward(rec, [x, w]).data
    assert np.array_equal(a, b)
    assert np.array_equal(a, _net(Tensor(x), Tensor(w)).data)


def test_replay_shape_mismatch_names_op(rng):
    rec = dc.trace(_net, Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(4, 2))))
    with pytest.raises(dc.ShapeError) as exc:
        dc.forward(rec, [rng.normal(size=(3, 5)), rng.normal(size=(4, 2))])
    assert exc.value.index is not None
    assert rec.nodes[exc.value.index].op == "matmul"


def test_replay_is_differentiable(rng):
    x, w = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    rec = dc.trace(_net, Tensor(x), Tensor(w))
    wp = _param(w)
    g = dc.backward(dc.forward(rec, [Tensor(x), wp]), [wp])[wp].data
    assert rel_err(g, central_diff(lambda v: float(np.sum(np.tanh(x @ v))), w)) < 1e-4


def test_no_grad_builds_no_graph():
    p = _param(2.0)
    with dc.no_grad():
        out = dc.square(p)
    assert not out.requires_grad


def test_records_are_thread_confined(rng):
    errors = []

    def work(seed):
        r = np.random.default_rng(seed)
        try:
            for _ in range(20):
                x, w = r.normal(size=(3, 4)), r.normal(size=(4, 2))
                wp = _param(w)
                g = dc.backward(_net(Tensor(x), wp), [wp])[wp].data
                expect = x.T @ (1 - np.tanh(x @ w) ** 2)
                if not np.allclose(g, expect, atol=1e-12):
                    errors.append(seed)
        except Exception as exc:  # pragma: no cover - surfaced below
            errors.append(exc)

    threads = [threading.Thread(target=work, args=(s,)) for s in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert errors == []


def test_determinism_forward_backward(rng):
    x, w = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    outs = []
    for _ in range(2):
        wp = _param(w)
        loss = _net(Tensor(x), wp)
        outs.append((loss.item(), dc.backward(loss, [wp])[wp].data))
    assert outs[0][0] == outs[1][0]
    assert np.array_equal(outs[0][1], outs[1][1])


def test_player_params_flat_roundtrip():
    pp = dc.PlayerParams([_param(np.ones((2, 2)))], [_param([5.0, 6.0])])
    assert pp.sizes == (4, 2) and pp.dim == 6
    x = np.arange(6.0)
    pp.assign_flat(x)
    assert np.array_equal(pp.flat(), x)
    with pytest.raises(dc.ShapeError):
        pp.assign_flat(np.zeros(5))
