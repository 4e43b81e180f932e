"""Randomized invariants."""

import filecmp

import numpy as np
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from snode_dmd import analysis as an
from snode_dmd import core, losses, model, nets, sde, sim
from snode_dmd.sde import LatentGaussian, SdeConfig

FAST = settings(max_examples=40, deadline=None,
                suppress_health_check=[HealthCheck.function_scoped_fixture])
finite = st.floats(-3, 3, allow_nan=False)
seeds = st.integers(0, 2 ** 31 - 1)

NET = nets.NetConfig(rank=2, L=2, mode_hidden=(8, 8), enc_hidden=(6, 6), drift_hidden=(5, 5),
                     zero_drift_output=False)
PARAMS = nets.init_params(NET, 3)


@FAST
@given(mu=arrays(float, 4, elements=finite), lv=arrays(float, 4, elements=st.floats(-4, 4)))
def test_kl_nonnegative(mu, lv):
    g = LatentGaussian.diagonal(nets.to_complex(mu), np.exp(lv))
    assert losses.latent_kl(g) >= 0


@FAST
@given(r=st.integers(1, 5))
def test_kl_zero_at_standard_normal(r):
    assert losses.latent_kl(LatentGaussian.diagonal(np.zeros(r), np.ones(2 * r))) == 0


@FAST
@given(m=st.integers(1, 12), seed=seeds)
def test_encoder_permutation_invariance(m, seed):
    rng = np.random.default_rng(seed)
    vals = rng.normal(size=m) + 1j * rng.normal(size=m)
    coords = rng.uniform(-1, 1, (m, 2))
    perm = rng.permutation(m)
    a = nets.encode_latent(PARAMS, vals, coords, NET)
    b = nets.encode_latent(PARAMS, vals[perm], coords[perm], NET)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


@FAST
@given(seed=seeds, substeps=st.integers(1, 6), tau=st.floats(0, 1))
def test_propagated_covariance_psd(seed, substeps, tau):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(4, 4))
    g = LatentGaussian(rng.normal(size=2) + 1j * rng.normal(size=2), A @ A.T)
    cfg = SdeConfig(substeps=substeps, delta_t=0.05, tau=tau)
    for _ in range(3):
        g = sde.propagate(g, PARAMS, 0.0, cfg, NET)
        assert np.array_equal(g.cov, g.cov.T)
        assert np.linalg.eigvalsh(g.cov).min() >= -1e-12 * max(1.0, np.abs(g.cov).max())
        C = g.complex_cov
        assert np.allclose(C, C.conj().T)


@FAST
@given(seed=seeds, c=st.floats(1e-3, 5))
def test_decode_variance_shift(seed, c):
    rng = np.random.default_rng(seed)
    W = rng.normal(size=(6, 2)) + 1j * rng.normal(size=(6, 2))
    A = rng.normal(size=(4, 4))
    g = LatentGaussian(np.zeros(2), A @ A.T)
    # complex isotropic shift c I in C^r is c/2 per real-lift coordinate
    g2 = LatentGaussian(np.zeros(2), A @ A.T + 0.5 * c * np.eye(4))
    d = model.decode(g2, W, 0.1).var - model.decode(g, W, 0.1).var
    assert np.allclose(d, c * np.sum(np.abs(W) ** 2, axis=1))


@FAST
@given(seed=seeds, n=st.integers(1, 20))
def test_grid_free_reconstruction(seed, n):
    rng = np.random.default_rng(seed)
    Q = rng.uniform(-1, 1, (n, 2))
    g = LatentGaussian.diagonal(rng.normal(size=2) + 0j, np.full(4, 0.1))
    cfg = model.ModelConfig(net=NET)
    full = model.reconstruct_at(g, Q, PARAMS, cfg)
    alone = model.reconstruct_at(g, Q[:1], PARAMS, cfg)
    assert np.allclose(full.mean[:1], alone.mean, rtol=1e-13, atol=1e-15)
    assert np.allclose(full.var[:1], alone.var, rtol=1e-13)


@FAST
@given(seed=seeds)
def test_mode_similarity_invariance(seed):
    rng = np.random.default_rng(seed)
    W = rng.normal(size=(15, 3)) + 1j * rng.normal(size=(15, 3))
    G = rng.normal(size=(15, 3)) + 1j * rng.normal(size=(15, 3))
    perm = rng.permutation(3)
    ph = np.exp(1j * rng.uniform(0, 2 * np.pi, 3))
    a = an.mode_similarity(W, G)
    b = an.mode_similarity(W[:, perm] * ph, G)
    c = an.mode_similarity(W, G * ph)
    assert np.isclose(a.mean_cosine, b.mean_cosine) and np.isclose(a.mean_cosine, c.mean_cosine)
    assert np.all((a.cosines >= 0) & (a.cosines <= 1 + 1e-12))


@FAST
@given(alpha=st.floats(-1, 0.5), omega=st.floats(-30, 30), dt=st.floats(0.01, 0.2))
def test_log_ratio_exact_below_nyquist(alpha, omega, dt):
    if abs(omega * dt) >= 0.99 * np.pi:
        return
    lam = alpha + 1j * omega
    z = np.exp(lam * dt * np.arange(20))
    assert abs(an.eigen_log_ratio(z, dt)[0] - lam) < 1e-8


@FAST
@given(seed=seeds, r=st.integers(1, 4))
def test_dmd_recovers_distinct_eigs(seed, r):
    rng = np.random.default_rng(seed)
    ang = np.sort(rng.uniform(-3, 3, r))
    if r > 1 and np.diff(ang).min() < 0.1:
        return
    mus = rng.uniform(0.7, 1.1, r) * np.exp(1j * ang)
    modes = rng.normal(size=(12, r)) + 1j * rng.normal(size=(12, r))
    Y = np.array([modes @ mus ** k for k in range(3 * r + 2)])
    err, _ = an.eigen_errors(an.exact_dmd(Y, r).mus, mus)
    assert err.max() < 1e-6


@FAST
@given(seed=seeds)
def test_velocity_inverse_consistency(seed):
    w = sim.initial_vorticity(32, 3.0, 1.0, seed)
    u, v = an.velocity_from_vorticity(w)
    k = np.fft.fftfreq(32, 1 / 32)
    curl = np.fft.ifft2(1j * k[None] * np.fft.fft2(v) - 1j * k[:, None] * np.fft.fft2(u)).real
    assert np.sqrt(np.mean((curl - w) ** 2)) < 1e-10


@FAST
@given(c=arrays(complex, 5, elements=st.complex_numbers(max_magnitude=10, allow_nan=False)))
def test_real_lift_round_trip(c):
    assert np.array_equal(nets.to_complex(nets.to_lift(c)), c)


@settings(max_examples=8, deadline=None)
@given(seed=st.integers(0, 1000), noise=st.sampled_from([0.0, 0.1]))
def test_dataset_round_trip_bytes(tmp_path_factory, seed, noise):
    d = tmp_path_factory.mktemp("ds")
    ds = sim.gen_synthetic(sim.SynthConfig(grid=8, T=5, noise_sigma=noise), seed=seed)
    core.save_dataset(ds, d / "a")
    back = core.load_dataset(d / "a")
    core.save_dataset(back, d / "b")
    assert np.array_equal(back.observations, ds.observations)
    assert np.array_equal(back.truth, ds.truth)
    for f in sorted(p.name for p in (d / "a").iterdir()):
        assert filecmp.cmp(d / "a" / f, d / "b" / f, shallow=False), f


@settings(max_examples=10, deadline=None)
@given(seed=seeds)
def test_seeded_sampling_bit_identical(seed):
    g = LatentGaussian.diagonal(np.array([1 + 1j, -0.5]), np.full(4, 0.2))
    cfg = SdeConfig(substeps=3, delta_t=0.05, tau=0.3)
    a = sde.sample_paths(g, PARAMS, 0.0, cfg, NET, seed, 4, 3)
    b = sde.sample_paths(g, PARAMS, 0.0, cfg, NET, seed, 4, 3)
    assert np.array_equal(a, b)


@settings(max_examples=20, deadline=None)
@given(n=st.integers(1, 3), m=st.integers(2, 40), seed=seeds)
def test_positional_encoding_bounds(n, m, seed):
    s = np.random.default_rng(seed).uniform(-1, 1, (m, 2))
    f = nets.positional_encode(s, n)
    assert f.shape == (m, (2 * n + 1) * 2)
    assert np.abs(f).max() <= 1.0
