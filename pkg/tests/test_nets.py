import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gantrack import diffcore as dc
from gantrack import nets
from gantrack.diffcore import Tensor
from gantrack.gameopt import disc_loss

from conftest import central_diff, rel_err

TINY = nets.NetConfig(hidden=5, fc_layers=2, fc_width=6, noise_dim=3)


def _lstm_params(rng, n_in, H, scale=0.5):
    return (Tensor(rng.normal(size=(n_in, 4 * H)) * scale, requires_grad=True),
            Tensor(rng.normal(size=(H, 4 * H)) * scale, requires_grad=True),
            Tensor(rng.normal(size=4 * H) * scale, requires_grad=True))


# -- lstm_step --------------------------------------------------------------

def test_lstm_zero_everything_gives_zero_hidden():
    H = 4
    params = (Tensor(np.zeros((3, 4 * H))), Tensor(np.zeros((H, 4 * H))), Tensor(np.zeros(4 * H)))
    h, c = nets.lstm_step(np.zeros((2, 3)), np.zeros((2, H)), np.zeros((2, H)), params)
    assert np.array_equal(h.data, np.zeros((2, H)))
    assert np.array_equal(c.data, np.zeros((2, H)))


def test_lstm_saturated_gates_keep_cell(rng):
    H = 3
    b = np.zeros(4 * H)
    b[:H] = -20.0  # input gate closed
    b[H:2 * H] = 20.0  # forget gate open
    params = (Tensor(np.zeros((2, 4 * H))), Tensor(np.zeros((H, 4 * H))), Tensor(b))
    c0 = rng.normal(size=(4, H))
    _, c1 = nets.lstm_step(rng.normal(size=(4, 2)), rng.normal(size=(4, H)), c0, params)
    assert np.max(np.abs(c1.data - c0)) < 1e-6


def test_lstm_step_weight_gradients(rng):
    n_in, H = 3, 4
    x, h0, c0 = rng.normal(size=(2, n_in)), rng.normal(size=(2, H)), rng.normal(size=(2, H))
    Wx, Wh, b = _lstm_params(rng, n_in, H)

    def loss_of(wx, wh, bb):
        h, c = nets.lstm_step(x, h0, c0, (Tensor(wx), Tensor(wh), Tensor(bb)))
        return float(np.sum(h.data * np.arange(1, H + 1)))

    h, _ = nets.lstm_step(x, h0, c0, (Wx, Wh, b))
    g = dc.backward(dc.sum(dc.mul(h, np.arange(1.0, H + 1))), [Wx, Wh, b])
    assert rel_err(g[Wx].data, central_diff(lambda w: loss_of(w, Wh.data, b.data), Wx.data)) < 1e-4
    assert rel_err(g[Wh].data, central_diff(lambda w: loss_of(Wx.data, w, b.data), Wh.data)) < 1e-4
    assert rel_err(g[b].data, central_diff(lambda w: loss_of(Wx.data, Wh.data, w), b.data)) < 1e-4


def test_lstm_step_shape_mismatch(rng):
    params = _lstm_params(rng, 3, 4)
    with pytest.raises(dc.ShapeError):
        nets.lstm_step(np.zeros((2, 5)), np.zeros((2, 4)), np.zeros((2, 4)), params)
    with pytest.raises(dc.ShapeError):
        nets.lstm_step(np.zeros((2, 3)), np.zeros((2, 4)), np.zeros((2, 3)), params)


def test_layer_run_matches_manual_steps(rng):
    layer = nets.LSTMLayer(2, 4, rng, "t")
    X = rng.normal(size=(3, 5, 2))
    h = c = np.zeros((3, 4))
    for t in range(5):
        ht, ct = nets.lstm_step(X[:, t], h, c, layer)
        h, c = ht.data, ct.data
    assert np.allclose(layer.run(Tensor(X)).data, h, atol=1e-14)


def test_forget_bias_initialized_to_one(rng):
    layer = nets.LSTMLayer(2, 4, rng, "t")
    assert np.array_equal(layer.b.data[4:8], np.ones(4))
    bound = 1 / np.sqrt(6)
    assert np.all(np.abs(layer.Wx.data) <= bound) and np.all(np.abs(layer.Wh.data) <= bound)


# -- generator / discriminator ---------------------------------------------

def test_full_profile_architecture():
    m = nets.GANModel(nets.profile("full"))
    assert m.gen.lstm.hidden == 128
    assert len(m.gen.fc) == 5  # four hidden FC layers of 64 + linear output
    assert all(layer.W.shape[1] == 64 for layer in m.gen.fc[:-1])
    assert m.gen.lstm.n_in == 2 + 16


def test_generate_shape_and_determinism(rng):
    m = nets.GANModel(TINY, seed=1)
    X, Z = rng.normal(size=(7, 11, 2)), m.gen.sample_noise(rng, 7, 11)
    a, b = nets.generate(m.gen, X, Z).data, nets.generate(m.gen, X, Z).data
    assert a.shape == (7, 2)
    assert np.array_equal(a, b)
    other = nets.generate(m.gen, X, m.gen.sample_noise(rng, 7, 11)).data
    assert np.max(np.abs(other - a)) > 0


def test_generate_rejects_length_mismatch(rng):
    m = nets.GANModel(TINY)
    with pytest.raises(dc.ShapeError):
        nets.generate(m.gen, rng.normal(size=(2, 5, 2)), rng.normal(size=(2, 4, 3)))


def test_uniform_noise_option(rng):
    g = nets.GANModel(nets.NetConfig(hidden=4, fc_layers=1, fc_width=4, noise_dim=2, noise="uniform")).gen
    z = g.sample_noise(rng, 100, 3)
    assert z.min() >= 0 and z.max() <= 1


def _zero_model():
    m = nets.GANModel(TINY)
    for p in m.disc.params():
        p.data = np.zeros_like(p.data)
    return m


def test_zero_discriminator_gives_half(rng):
    d = _zero_model().disc
    out = nets.discriminate(d, rng.normal(size=(4, 6, 2)), rng.normal(size=(4, 2))).data
    assert np.array_equal(out, np.full(4, 0.5))


def test_discriminator_open_interval_random_inputs():
    rng = np.random.default_rng(5)
    m = nets.GANModel(TINY, seed=2)
    X, y = rng.uniform(-100, 100, size=(1000, 3, 2)), rng.uniform(-100, 100, size=(1000, 2))
    out = nets.discriminate(m.disc, X, y).data
    assert np.all(out > 0) and np.all(out < 1)


@given(st.floats(-10, 10), st.integers(0, 2 ** 16))
def test_forward_finite_for_large_weights(scale, seed):
    rng = np.random.default_rng(seed)
    m = nets.GANModel(TINY, seed=seed)
    for p in m.gen.params() + m.disc.params():
        p.data = rng.uniform(-1, 1, size=p.shape) * scale
    X = rng.uniform(-100, 100, size=(3, 4, 2))
    a = nets.generate(m.gen, X, rng.uniform(-100, 100, size=(3, 4, 3))).data
    d = nets.discriminate(m.disc, X, a).data
    assert np.all(np.isfinite(a))
    assert np.all((d > 0) & (d < 1))


def test_log_d_gradient_wrt_action(rng):
    m = nets.GANModel(TINY, seed=4)
    X = rng.normal(size=(3, 4, 2))
    y0 = rng.normal(size=(3, 2))
    y = Tensor(y0, requires_grad=True)
    g = dc.backward(dc.sum(dc.log(nets.discriminate(m.disc, X, y))), [y])[y].data
    fd = central_diff(lambda v: float(np.sum(np.log(nets.discriminate(m.disc, X, v).data))), y0)
    assert rel_err(g, fd) < 1e-4


def test_end_to_end_disc_loss_wrt_generator_weight(rng):
    m = nets.GANModel(TINY, seed=9)
    X, Y, Z = rng.normal(size=(4, 5, 2)), rng.normal(size=(4, 2)), m.gen.sample_noise(rng, 4, 5)
    W = m.gen.fc[0].W

    def loss():
        fake = nets.generate(m.gen, X, Z)
        return disc_loss(nets.discriminate(m.disc, X, Y), nets.discriminate(m.disc, X, fake))

    g = dc.backward(loss(), [W])[W].data
    w0 = W.data.copy()

    def f(w):
        W.data = w
        out = loss().item()
        W.data = w0
        return out

    assert rel_err(g, central_diff(f, w0)) < 1e-3


# -- normalizer, policy -----------------------------------------------------

def test_normalizer_maps_to_unit_box(rng):
    H = rng.uniform(1, 5, size=(50, 4, 2))
    A = rng.normal(size=(50, 2))
    n = nets.Normalizer.fit(H, A)
    s = n.states(H)
    assert s.min() >= -1 - 1e-12 and s.max() <= 1 + 1e-12
    assert np.allclose(n.actions_inv(n.actions(A)), A, atol=1e-14)


def test_policy_output_in_raw_units(rng):
    m = nets.GANModel(TINY, seed=3)
    H = rng.uniform(1, 3, size=(6, 11, 2))
    a = m.policy().sample(H, np.random.default_rng(0))
    b = m.policy().sample(H, np.random.default_rng(0))
    assert a.shape == (6, 2) and np.array_equal(a, b)


# -- checkpoints ------------------------------------------------------------

def test_checkpoint_roundtrip_bit_exact(tmp_path, rng):
    m = nets.GANModel(TINY, seed=5)
    m.normalizer = nets.Normalizer.fit(rng.uniform(1, 5, size=(20, 3, 2)), rng.normal(size=(20, 2)))
    path = nets.save_checkpoint(m, tmp_path / "m.json", {"iteration": 7, "gamma": 0.33, "alpha": 0.01, "seed": 5})
    back = nets.load_checkpoint(path)
    for a, b in zip(m.gen.params() + m.disc.params(), back.gen.params() + back.disc.params()):
        assert a.name == b.name and np.array_equal(a.data, b.data)
    for k, v in m.normalizer.arrays().items():
        assert np.array_equal(v, back.normalizer.arrays()[k])
    assert back.metadata["iteration"] == 7 and back.metadata["gamma"] == 0.33


def test_truncated_checkpoint_is_corrupt(tmp_path):
    path = nets.save_checkpoint(nets.GANModel(TINY), tmp_path / "m.json")
    text = path.read_text()
    path.write_text(text[: len(text) // 2])
    with pytest.raises(nets.CorruptCheckpointError):
        nets.load_checkpoint(path)


def test_tampered_values_fail_digest(tmp_path):
    path = nets.save_checkpoint(nets.GANModel(TINY), tmp_path / "m.json")
    doc = json.loads(path.read_text())
    doc["arrays"][0]["values"][0] += 1.0
    path.write_text(json.dumps(doc))
    with pytest.raises(nets.CorruptCheckpointError):
        nets.load_checkpoint(path)


def test_version_zero_rejected(tmp_path):
    path = nets.save_checkpoint(nets.GANModel(TINY), tmp_path / "m.json")
    doc = json.loads(path.read_text())
    doc["version"] = 0
    path.write_text(json.dumps(doc))
    with pytest.raises(nets.CheckpointVersionError):
        nets.load_checkpoint(path)


def test_shape_disagreement_rejected(tmp_path):
    path = nets.save_checkpoint(nets.GANModel(TINY), tmp_path / "m.json")
    doc = json.loads(path.read_text())
    doc["config"]["hidden"] = 6
    path.write_text(json.dumps(doc))
    with pytest.raises(nets.CheckpointShapeError):
        nets.load_checkpoint(path)


def test_error_classes_are_distinct():
    kinds = {nets.CorruptCheckpointError, nets.CheckpointVersionError, nets.CheckpointShapeError}
    assert len(kinds) == 3 and all(issubclass(k, nets.CheckpointError) for k in kinds)
