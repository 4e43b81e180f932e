import numpy as np
import pytest

from snode_dmd import diffengine as de
from snode_dmd import losses, model, nets
from snode_dmd.losses import LossWeights
from snode_dmd.sde import LatentGaussian

HALF_LOG_2PI = 0.5 * np.log(2 * np.pi)


class TestReconNll:
    def test_exact_fit_unit_variance(self):
        y = np.array([0.3, -1.2, 2.0])
        pred = model.FieldPrediction(y.astype(complex), np.ones(3))
        assert losses.recon_nll(y, pred) == pytest.approx(HALF_LOG_2PI, abs=1e-12)
        assert HALF_LOG_2PI == pytest.approx(0.918939, abs=1e-6)

    def test_unit_residual(self):
        pred = model.FieldPrediction(np.zeros(4, complex), np.ones(4))
        assert losses.recon_nll(np.ones(4), pred) == pytest.approx(1.418939, abs=1e-6)

    def test_optimal_variance_is_squared_residual(self):
        r = 0.7
        grid = np.linspace(0.05, 2.0, 4001)
        vals = [losses.recon_nll(np.array([r]), model.FieldPrediction(np.zeros(1, complex),
                                                                      np.array([v])))
                for v in grid]
        assert grid[int(np.argmin(vals))] == pytest.approx(r ** 2, abs=1e-3)

    def test_complex_convention(self):
        # each of re/im against var/2: residual (1, 1), var 2 -> 2 * N(1; 0, 1)
        pred = model.FieldPrediction(np.zeros(1, complex), np.array([2.0]))
        val = losses.recon_nll(np.array([1 + 1j]), pred, complex_data=True)
        assert val == pytest.approx(2 * (HALF_LOG_2PI + 0.5), abs=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            losses.recon_nll(np.zeros(3), model.FieldPrediction(np.zeros(2, complex), np.ones(2)))


class TestLatentKl:
    def test_standard_normal_zero(self):
        assert losses.latent_kl(LatentGaussian.diagonal([0, 0], np.ones(4))) == 0.0

    def test_unit_mean_shift(self):
        g = LatentGaussian.diagonal([1.0], [1.0, 1.0])
        assert losses.latent_kl(g) == pytest.approx(0.5, abs=1e-15)

    def test_matches_monte_carlo(self):
        rng = np.random.default_rng(8)
        mu = np.array([0.4 - 0.3j, -0.8 + 0.1j])
        var = np.array([0.5, 1.7, 0.3, 1.2])
        g = LatentGaussian.diagonal(mu, var)
        m = nets.to_lift(mu)
        z = m + np.sqrt(var) * rng.standard_normal((1_000_000, 4))
        logq = -0.5 * (np.log(2 * np.pi * var) + (z - m) ** 2 / var).sum(1)
        logp = -0.5 * (np.log(2 * np.pi) + z ** 2).sum(1)
        mc = float(np.mean(logq - logp))
        assert losses.latent_kl(g) == pytest.approx(mc, rel=0.01)

    def test_requires_diagonal(self):
        with pytest.raises(ValueError):
            losses.latent_kl(LatentGaussian([0.0], [[1.0, 0.2], [0.2, 1.0]]))


class TestConsistency:
    def test_identical_zero(self):
        g = LatentGaussian.diagonal([0.3 + 1j, -2], [0.2, 0.4, 1.0, 3.0])
        assert losses.consistency(g, g, 1e-3) == 0.0

    def test_closed_form(self):
        r, s2, kappa = 3, 0.4, 0.25
        var = np.full(2 * r, s2)
        a = LatentGaussian.diagonal(np.zeros(r), var)
        b = LatentGaussian.diagonal(np.array([1.0, 0, 0]), var)
        expected = 1 / (2 * r) + kappa * 1 / (2 * s2)
        assert losses.consistency(a, b, kappa) == pytest.approx(expected, abs=1e-14)

    def test_kappa_zero_pure_mse(self):
        a = LatentGaussian.diagonal([1j], [0.1, 0.1])
        b = LatentGaussian.diagonal([0.0], [5.0, 5.0])
        assert losses.consistency(a, b, 0.0) == pytest.approx(0.5)


def _toy_batch(cfg, seed=0):
    rng = np.random.default_rng(seed)
    feats = nets.positional_encode(rng.uniform(-1, 1, (6, 2)), cfg.net.L)
    y = rng.normal(size=(2, 3, 6, 2))
    return {"y": y, "feats": feats, "t0": np.array([0.0, 0.1])}


@pytest.fixture
def toy(tiny_net):
    cfg = model.ModelConfig(net=tiny_net, dt=0.1, substeps=2)
    return cfg, nets.init_params(tiny_net, 1), _toy_batch(cfg)


def test_all_weights_zero(toy):
    cfg, P, batch = toy
    loss, _ = losses.total_loss(P.leaves(), batch, LossWeights(0, 0, 0, 0), cfg)
    assert float(loss.value) == 0.0


def test_default_weights():
    w = LossWeights()
    assert (w.w_recon, w.w_kl, w.w_cons, w.kappa) == (3.0, 1e-3, 0.15, 1e-3)
    with pytest.raises(ValueError):
        LossWeights(w_kl=-1.0)


def test_linear_in_weights(toy):
    cfg, P, batch = toy
    _, terms = losses.total_loss(P.leaves(), batch, LossWeights(), cfg)
    for w in (LossWeights(2.0, 0.5, 0.7, 1e-3), LossWeights(0.1, 3.0, 0.0, 1e-3)):
        loss, t2 = losses.total_loss(P.leaves(), batch, w, cfg)
        expected = w.w_recon * terms["recon"] + w.w_kl * terms["kl"]
        if w.w_cons:
            expected += w.w_cons * t2["cons"]
        assert float(loss.value) == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("mode", [model.TEACHER, model.AUTOREGRESSIVE])
@pytest.mark.parametrize("term", ["recon", "kl", "cons", "total"])
def test_gradients_fd(toy, mode, term):
    cfg, P, batch = toy
    weights = {"recon": LossWeights(1, 0, 0, 0), "kl": LossWeights(0, 1, 0, 0),
               "cons": LossWeights(0, 0, 1, 0.5), "total": LossWeights()}[term]
    rng = np.random.default_rng(2)
    coords = rng.choice(P.size, 60, replace=False)
    f = lambda L, inp, _s: losses.total_loss(L, inp, weights, cfg, mode)
    rep = de.finite_difference_check(f, P, batch, h=1e-5, tol=1e-4, coords=coords)
    assert rep.passed, rep.worst()
