import numpy as np
import pytest
from hypothesis import given, strategies as st

from gantrack import diffcore as dc
from gantrack import gameopt as go
from gantrack import lvsys, nets
from gantrack.diffcore import Tensor

from conftest import central_diff, rel_err

RAW = dict(precondition=False)
TINY = nets.NetConfig(hidden=5, fc_layers=1, fc_width=6, noise_dim=3)


# -- losses -----------------------------------------------------------------

def test_disc_loss_at_half():
    assert go.disc_loss(np.full(4, 0.5), np.full(4, 0.5)).item() == pytest.approx(2 * np.log(2), abs=1e-12)


def test_disc_loss_perfect_discriminator_limit():
    loss = go.disc_loss(np.full(3, 1 - 1e-9), np.full(3, 1e-9)).item()
    assert 0 < loss < 1e-8


def test_gen_loss_values():
    assert go.gen_loss(np.full(3, 0.5)).item() == pytest.approx(np.log(2), abs=1e-12)
    assert 0 < go.gen_loss(np.full(3, 1 - 1e-9)).item() < 1e-8


@given(st.lists(st.floats(0.01, 0.98), min_size=1, max_size=5), st.integers(0, 4), st.floats(1e-3, 0.01))
def test_gen_loss_strictly_decreasing(d, k, bump):
    k = k % len(d)
    up = list(d)
    up[k] += bump
    assert go.gen_loss(np.array(up)).item() < go.gen_loss(np.array(d)).item()


def test_disc_loss_gradient_wrt_discriminator(rng):
    m = nets.GANModel(TINY, seed=2)
    X, Y, Z = rng.normal(size=(4, 5, 2)), rng.normal(size=(4, 2)), m.gen.sample_noise(rng, 4, 5)
    game = go.GANGame(m)
    batch = go.GANBatch(X, Y, Z)
    W = m.disc.fc[0].W
    g = dc.backward(game.losses(batch)[0], [W])[W].data
    w0 = W.data.copy()

    def f(w):
        W.data = w
        out = game.losses(batch)[0].item()
        W.data = w0
        return out

    assert rel_err(g, central_diff(f, w0)) < 1e-3


# -- gradient field ---------------------------------------------------------

def test_bilinear_field_at_two_three():
    assert np.array_equal(go.gradient_field(go.BilinearGame(2.0, 3.0)), [3.0, -2.0])


def test_bilinear_field_zero_at_equilibrium():
    assert np.linalg.norm(go.gradient_field(go.BilinearGame(0.0, 0.0))) < 1e-8


def test_gan_field_dimension(rng):
    m = nets.GANModel(TINY)
    game = go.GANGame(m)
    batch = go.GANBatch(rng.normal(size=(3, 4, 2)), rng.normal(size=(3, 2)), m.gen.sample_noise(rng, 3, 4))
    v = go.gradient_field(game, batch)
    assert v.shape == (sum(game.params.sizes),)
    assert game.params.sizes[0] == dc.sum_sizes(m.disc.params())


# -- SGA / consensus --------------------------------------------------------

def test_sga_bilinear_norm_growth():
    game = go.BilinearGame(1.0, 0.0)
    cfg = go.OptimizerConfig(alpha=0.1, **RAW)
    x = go.sga_step(game.params, go.gradient_field(game), cfg)
    assert np.linalg.norm(x) == pytest.approx(np.sqrt(1.01), rel=1e-12)
    assert np.linalg.norm(x) == pytest.approx(1.004987562, abs=1e-9)


def test_sga_fixed_points():
    game = go.BilinearGame(0.7, -0.2)
    x0 = game.params.flat()
    assert np.array_equal(go.sga_step(game.params, np.zeros(2), go.OptimizerConfig(alpha=0.1, **RAW)), x0)
    g2 = go.BilinearGame(0.7, -0.2)
    tiny = go.OptimizerConfig(alpha=1e-300, **RAW)
    assert np.array_equal(go.sga_step(g2.params, go.gradient_field(g2), tiny), x0)


def test_alpha_must_be_positive():
    with pytest.raises(ValueError):
        go.OptimizerConfig(alpha=0.0)
    with pytest.raises(ValueError):
        go.OptimizerConfig(gamma=-1)
    with pytest.raises(ValueError):
        go.OptimizerConfig(rho=1.0)


@given(st.floats(-5, 5), st.floats(-5, 5))
def test_consensus_bilinear_contraction_factor(theta, phi):
    if np.hypot(theta, phi) < 1e-3:
        return
    game = go.BilinearGame(theta, phi)
    cfg = go.OptimizerConfig(alpha=0.1, gamma=1.0, **RAW)
    n0 = np.sum(game.params.flat() ** 2)
    info = go.consensus_step(game, None, cfg)
    assert np.sum(info.x ** 2) / n0 == pytest.approx(0.82, rel=1e-10)


@given(st.floats(-5, 5), st.floats(-5, 5), st.booleans())
def test_consensus_gamma_zero_equals_sga(theta, phi, precond):
    cfg = go.OptimizerConfig(alpha=0.1, gamma=0.0, precondition=precond)
    a, b = go.BilinearGame(theta, phi), go.BilinearGame(theta, phi)
    ra, rb = go.RMSPropState.zeros(2), go.RMSPropState.zeros(2)
    for _ in range(3):
        xa = go.consensus_step(a, None, cfg, ra).x
        xb = go.sga_step(b.params, go.gradient_field(b), cfg, rb)
        assert np.array_equal(xa, xb)


def test_consensus_gamma_zero_equals_sga_on_gan(rng):
    cfg = go.OptimizerConfig(alpha=0.01, gamma=0.0)
    ma, mb = nets.GANModel(TINY, seed=1), nets.GANModel(TINY, seed=1)
    ga, gb = go.GANGame(ma), go.GANGame(mb)
    ra, rb = go.RMSPropState.zeros(ga.params.dim), go.RMSPropState.zeros(gb.params.dim)
    for _ in range(2):
        batch = go.GANBatch(rng.normal(size=(3, 4, 2)), rng.normal(size=(3, 2)), ma.gen.sample_noise(rng, 3, 4))
        xa = go.consensus_step(ga, batch, cfg, ra).x
        xb = go.sga_step(gb.params, go.gradient_field(gb, batch), cfg, rb)
        assert np.array_equal(xa, xb)


def test_consensus_equilibrium_is_fixed():
    for gamma in (0.0, 0.33, 1.0, 5.0):
        game = go.BilinearGame(0.0, 0.0)
        info = go.consensus_step(game, None, go.OptimizerConfig(alpha=0.1, gamma=gamma, **RAW))
        assert np.array_equal(info.x, [0.0, 0.0])


def test_rmsprop_state_nonnegative(rng):
    st_ = go.RMSPropState.zeros(5)
    cfg = go.OptimizerConfig()
    for _ in range(10):
        st_.precondition(rng.normal(size=5), cfg)
    assert np.all(st_.mean_square >= 0)


def test_non_finite_update_reported():
    class Bad:
        params = go.BilinearGame(1.0, 1.0).params

        def field(self, batch, create_graph):
            return [Tensor(np.array([np.nan])), Tensor(np.array([1.0]))], {"disc_loss": 0.0, "gen_loss": 0.0}

    with pytest.raises(go.NonFiniteStepError) as exc:
        go.consensus_step(Bad(), None, go.OptimizerConfig(), iteration=17)
    assert exc.value.iteration == 17


# -- bilinear training behaviour --------------------------------------------

def test_bilinear_consensus_converges_within_500():
    game = go.BilinearGame(1.0, 1.0)
    cfg = go.OptimizerConfig(alpha=0.1, gamma=1.0, **RAW)
    for k in range(500):
        x = go.consensus_step(game, None, cfg).x
        if np.linalg.norm(x) < 1e-3:
            break
    assert np.linalg.norm(x) < 1e-3


def test_bilinear_sga_never_converges():
    game = go.BilinearGame(1.0, 1.0)
    cfg = go.OptimizerConfig(alpha=0.1, **RAW)
    norms = [np.linalg.norm(game.params.flat())]
    for _ in range(200):
        norms.append(np.linalg.norm(go.consensus_step(game, None, cfg).x))
    assert np.all(np.diff(norms) >= 0)


# -- train loop -------------------------------------------------------------

@pytest.fixture(scope="module")
def small_pairs():
    ds = lvsys.sample_dataset(6, 21)
    return ds.pairs([0, 1, 2, 3]), ds.pairs([4, 5])


def test_train_log_rows_and_csv(tmp_path, small_pairs):
    train, val = small_pairs
    cfg = go.OptimizerConfig(iterations=20, log_every=5, batch_size=8, seed=3)
    m = nets.GANModel(TINY, seed=3)
    tlog = go.train(m, train, cfg, val=val, log_path=tmp_path / "log.csv", checkpoint_path=tmp_path / "c.json")
    assert len(tlog.records) == 20 // 5
    rows = go.read_log(tmp_path / "log.csv")
    assert [r.iteration for r in rows] == [5, 10, 15, 20]
    assert (tmp_path / "log.csv").read_text().splitlines()[0] == ",".join(go.LOG_COLUMNS)
    back = nets.load_checkpoint(tmp_path / "c.json")
    assert back.metadata["iteration"] == 20
    for a, b in zip(m.gen.params(), back.gen.params()):
        assert np.array_equal(a.data, b.data)


def test_train_deterministic(small_pairs):
    train, val = small_pairs
    logs = []
    for _ in range(2):
        cfg = go.OptimizerConfig(iterations=10, log_every=5, batch_size=8, gamma=0.33, seed=4)
        tl = go.train(nets.GANModel(TINY, seed=4), train, cfg, val=val)
        logs.append([(r.disc_loss, r.gen_loss, r.v_norm, r.val_mae) for r in tl.records])
    assert logs[0] == logs[1]


def test_train_divergence_stops_with_diagnostic(small_pairs):
    train, val = small_pairs
    cfg = go.OptimizerConfig(iterations=50, log_every=10, batch_size=8, divergence_threshold=1e-9)
    tl = go.train(nets.GANModel(TINY), train, cfg, val=val)
    assert tl.diverged and "iteration 1" in tl.diagnostic
    assert len(tl.records) == 1


def test_periodic_checkpoint_is_loadable(tmp_path, small_pairs):
    train, val = small_pairs
    cfg = go.OptimizerConfig(iterations=6, log_every=3, checkpoint_every=3, batch_size=8)
    go.train(nets.GANModel(TINY), train, cfg, val=val, checkpoint_path=tmp_path / "c.json")
    assert nets.load_checkpoint(tmp_path / "c.json").metadata["iteration"] == 6
    assert not (tmp_path / "c.json.tmp").exists()
