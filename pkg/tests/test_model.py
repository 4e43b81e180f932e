import numpy as np
import pytest

from snode_dmd import model, nets
from snode_dmd.core import CoordSet, Field, grid_coords
from snode_dmd.sde import LatentGaussian


@pytest.fixture(scope="module")
def setup():
    net = nets.NetConfig(rank=2, L=2, mode_hidden=(16, 16), enc_hidden=(8, 8),
                         drift_hidden=(8, 8), zero_drift_output=False)
    cfg = model.ModelConfig(net=net, dt=0.1, substeps=3)
    P = nets.init_params(net, 7)
    rng = np.random.default_rng(0)
    grid = grid_coords(6)
    idx = np.sort(rng.choice(36, 10, replace=False))
    obs = rng.normal(size=(5, 10)) + 1j * rng.normal(size=(5, 10))
    return cfg, P, CoordSet(grid[idx]), obs, grid


class TestDecode:
    def test_zero_covariance(self, rng):
        W = rng.normal(size=(6, 2)) + 1j * rng.normal(size=(6, 2))
        p = model.decode(LatentGaussian.point([1.0, 1j]), W, 1e-4)
        np.testing.assert_allclose(p.var, 1e-4, rtol=1e-12)
        np.testing.assert_allclose(p.mean, W @ np.array([1.0, 1j]), atol=1e-14)

    def test_identity_rows(self):
        g = LatentGaussian([0.0, 0.0], 0.5 * np.eye(4))  # complex covariance I
        p = model.decode(g, np.eye(2), 1e-3)
        np.testing.assert_allclose(p.var, 1.0 + 1e-3, rtol=1e-12)

    def test_variance_matches_monte_carlo(self, rng):
        W = rng.normal(size=(4, 3)) + 1j * rng.normal(size=(4, 3))
        C = rng.normal(size=(6, 6))
        g = LatentGaussian(rng.normal(size=3) + 1j * rng.normal(size=3), C @ C.T * 0.2)
        s2 = 0.05
        p = model.decode(g, W, s2)
        n = 100_000
        z = rng.multivariate_normal(nets.to_lift(g.mean), g.cov, size=n)
        noise = (rng.normal(size=(n, 4)) + 1j * rng.normal(size=(n, 4))) * np.sqrt(s2 / 2)
        y = nets.to_complex(z) @ W.T + noise
        emp = np.mean(np.abs(y - p.mean) ** 2, axis=0)
        np.testing.assert_allclose(emp, p.var, rtol=0.05)

    def test_variance_shift_identity(self, rng):
        W = rng.normal(size=(5, 2)) + 1j * rng.normal(size=(5, 2))
        C = rng.normal(size=(4, 4))
        g = LatentGaussian([0.1, 0.2j], C @ C.T)
        c = 0.37
        g2 = LatentGaussian(g.mean, g.cov + 0.5 * c * np.eye(4))
        d = model.decode(g2, W, 0.01).var - model.decode(g, W, 0.01).var
        np.testing.assert_allclose(d, c * np.sum(np.abs(W) ** 2, axis=1), rtol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            model.decode(LatentGaussian.point([1.0, 1.0]), np.ones((3, 3)), 0.1)


class TestStep:
    def test_zero_field_finite(self, setup):
        cfg, P, S, obs, _ = setup
        pred, enc, prop = model.step(np.zeros(len(S)), S, 0.0, P, cfg)
        assert np.isfinite(pred.mean).all() and np.all(pred.var > 0)

    def test_deterministic(self, setup):
        cfg, P, S, obs, _ = setup
        a = model.step(Field(obs[0], S), S, 0.0, P, cfg)[0]
        b = model.step(Field(obs[0], S), S, 0.0, P, cfg)[0]
        assert a.mean.tobytes() == b.mean.tobytes() and a.var.tobytes() == b.var.tobytes()

    def test_reconstruct_at_sensors_matches_step(self, setup):
        cfg, P, S, obs, _ = setup
        pred, _, prop = model.step(obs[0], S, 0.0, P, cfg)
        rec = model.reconstruct_at(prop, S, P, cfg)
        np.testing.assert_allclose(rec.mean, pred.mean, atol=1e-13)
        np.testing.assert_allclose(rec.var, pred.var, rtol=1e-12)

    def test_grid_free(self, setup):
        cfg, P, S, obs, grid = setup
        _, _, prop = model.step(obs[0], S, 0.0, P, cfg)
        fine = grid_coords(13)
        full = model.reconstruct_at(prop, fine, P, cfg)
        single = model.reconstruct_at(prop, fine[40:41], P, cfg)
        assert single.mean.shape == (1,)
        np.testing.assert_allclose(single.mean, full.mean[40:41], atol=1e-14)
        chunked = model.reconstruct_at(prop, fine, P, cfg, chunk=7)
        np.testing.assert_allclose(chunked.mean, full.mean, atol=1e-14)


class TestRollout:
    def test_first_step_modes_agree(self, setup):
        cfg, P, S, obs, _ = setup
        tf = model.rollout(obs[0], S, 3, P, cfg, model.TEACHER, observations=obs)
        ar = model.rollout(obs[0], S, 3, P, cfg, model.AUTOREGRESSIVE)
        # batched vs unbatched BLAS calls may differ in the last bit
        np.testing.assert_allclose(tf.predictions[0].mean, ar.predictions[0].mean, rtol=1e-12,
                                   atol=1e-15)
        np.testing.assert_allclose(tf.predictions[0].var, ar.predictions[0].var, rtol=1e-12)
        assert not np.allclose(tf.predictions[2].mean, ar.predictions[2].mean)

    def test_teacher_latents_are_encodings(self, setup):
        cfg, P, S, obs, _ = setup
        tf = model.rollout(obs[0], S, 4, P, cfg, model.TEACHER, observations=obs)
        for k in range(4):
            mu, var = nets.encode_latent(P, obs[k], S.coords, cfg.net)
            np.testing.assert_allclose(nets.to_lift(tf.latents_encoded[k].mean), mu, atol=1e-13)
            np.testing.assert_allclose(np.diag(tf.latents_encoded[k].cov), var, rtol=1e-12)

    def test_horizon_too_long(self, setup):
        cfg, P, S, obs, _ = setup
        with pytest.raises(ValueError):
            model.rollout(obs[0], S, 5, P, cfg, model.TEACHER, observations=obs)

    def test_autoregressive_feeds_mean(self, setup):
        cfg, P, S, obs, _ = setup
        ar = model.rollout(obs[0], S, 2, P, cfg, model.AUTOREGRESSIVE)
        mu, _ = nets.encode_latent(P, ar.predictions[0].mean, S.coords, cfg.net)
        np.testing.assert_allclose(nets.to_lift(ar.latents_encoded[1].mean), mu, atol=1e-13)

    def test_lengths(self, setup):
        cfg, P, S, obs, _ = setup
        r = model.rollout(obs[0], S, 3, P, cfg, model.AUTOREGRESSIVE)
        assert len(r.predictions) == len(r.latents_encoded) == len(r.latents_propagated) == 3
        assert r.mode_matrix.shape == (len(S), 2)


def test_model_config_roundtrip():
    cfg = model.ModelConfig(net=nets.NetConfig(rank=3), dt=0.2, tau=0.1, complex_data=False)
    assert model.ModelConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.sde.delta_t == pytest.approx(0.04)


def test_prediction_requires_positive_variance():
    with pytest.raises(ValueError):
        model.FieldPrediction(np.zeros(2), np.array([1.0, 0.0]))
