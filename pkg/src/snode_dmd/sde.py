"""Euler-Maruyama integration of the latent SDE with covariance transport.

Latent Gaussians are carried in the real lift: ``mean`` is complex (r,),
``cov`` is the real (2r, 2r) covariance of the interleaved real/imag
coordinates. Standard complex noise puts variance 1/2 on each real
coordinate, so the per-substep process noise in the lift is
``delta_t * tau^2 / 2 * I``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffengine as de
from .core import hermitian_psd_project
from .nets import NetConfig, drift_and_jacobian, to_complex, to_lift


class IntegrationError(FloatingPointError):
    pass


@dataclass(frozen=True)
class LatentGaussian:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=complex)
        cov = np.asarray(self.cov, dtype=float)
        r2 = 2 * mean.shape[-1]
        if cov.shape != (r2, r2):
            raise ValueError(f"covariance must be ({r2}, {r2}) in the real lift, got {cov.shape}")
        if not (np.isfinite(mean).all() and np.isfinite(cov).all()):
            raise ValueError("latent Gaussian must be finite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def rank(self):
        return self.mean.shape[-1]

    @property
    def complex_cov(self) -> np.ndarray:
        """``E[(phi - mu)(phi - mu)^H]`` as an r x r Hermitian matrix."""
        C = self.cov
        rr, ii = C[0::2, 0::2], C[1::2, 1::2]
        ri, ir = C[0::2, 1::2], C[1::2, 0::2]
        return rr + ii + 1j * (ir - ri)

    @classmethod
    def diagonal(cls, mean, var_lift):
        return cls(mean, np.diag(np.asarray(var_lift, dtype=float)))

    @classmethod
    def point(cls, mean):
        mean = np.asarray(mean, dtype=complex)
        return cls(mean, np.zeros((2 * mean.size, 2 * mean.size)))


@dataclass(frozen=True)
class SdeConfig:
    """Substep layout; ``tau=None`` means use the learned diffusion scale."""

    substeps: int = 5
    delta_t: float = 0.02
    tau: float | None = None

    def __post_init__(self):
        if self.substeps < 1:
            raise ValueError("need at least one substep")
        if not self.delta_t > 0:
            raise ValueError("delta_t must be positive")
        if self.tau is not None and self.tau < 0:
            raise ValueError("tau must be non-negative")

    @classmethod
    def for_interval(cls, dt, substeps=5, tau=None):
        return cls(substeps, dt / substeps, tau)

    @property
    def horizon(self):
        return self.substeps * self.delta_t

    def check_interval(self, dt):
        if abs(self.horizon - dt) > 1e-9 * abs(dt):
            raise ValueError(f"substeps * delta_t = {self.horizon} does not match dt = {dt}")


def _tau2(P, cfg: SdeConfig):
    if cfg.tau is not None:
        return cfg.tau ** 2
    return de.exp(P["noise.log_tau2"])


def propagate_lift(P, mu, cov, t0, cfg: SdeConfig, net_cfg: NetConfig):
    """Differentiable moment propagation over one observation interval.

    ``mu``: (B, 2r) tensor, ``cov``: (B, 2r, 2r) tensor, ``t0``: (B,) times.
    Per substep: mean Euler step, ``A = I + dt J`` from the analytic drift
    Jacobian, ``cov <- A cov A^T + dt tau^2/2 I``, symmetrize, and clamp to
    PSD if rounding pushed an eigenvalue below zero (the clamp passes
    gradients straight through).
    """
    r2 = 2 * net_cfg.rank
    eye = np.eye(r2)
    dt = cfg.delta_t
    q = _tau2(P, cfg) * (0.5 * dt)
    noise = de.reshape(q, (1, 1, 1)) * eye if isinstance(q, de.Tensor) else q * eye
    t0 = np.asarray(t0, dtype=float).reshape(-1)
    for p in range(cfg.substeps):
        t = t0 + p * dt
        try:
            d, J = drift_and_jacobian(P, mu, t, net_cfg)
            mu_next = mu + d * dt
            A = J * dt + eye
            cov = de.sandwich(A, cov) + noise
            cov = (cov + cov.T) * 0.5
        except de.NonFiniteError as exc:
            raise IntegrationError(f"substep {p}: {exc}") from exc
        w = np.linalg.eigvalsh(cov.value)
        if w.min() < 0:
            cov = de.straight_through(cov, hermitian_psd_project(cov.value))
        mu = mu_next
    return mu, cov


def _const(params):
    if isinstance(params, dict):
        return params
    return {n: de.Tensor(params[n]) for n in params.names}


def propagate(g: LatentGaussian, params, t: float, cfg: SdeConfig,
              net_cfg: NetConfig) -> LatentGaussian:
    """Push a latent Gaussian forward by ``substeps * delta_t``."""
    P = _const(params)
    mu = to_lift(g.mean)[None]
    mu2, cov2 = propagate_lift(P, de.Tensor(mu), de.Tensor(g.cov[None]), [t], cfg, net_cfg)
    return LatentGaussian(to_complex(mu2.value[0]), cov2.value[0])


def jacobian_real_lift(params, phi, t: float, net_cfg: NetConfig) -> np.ndarray:
    """Real-lift Jacobian (2r, 2r) of the total drift at ``phi``."""
    phi = np.asarray(phi, dtype=complex)
    if not np.isfinite(phi).all():
        raise ValueError("phi must be finite")
    _, J = drift_and_jacobian(_const(params), to_lift(phi)[None], [t], net_cfg)
    return J.value[0]


def _sqrt_psd(C):
    w, Q = np.linalg.eigh(0.5 * (C + C.T))
    return Q * np.sqrt(np.clip(w, 0.0, None))


def sample_paths(g0: LatentGaussian, params, t0: float, cfg: SdeConfig, net_cfg: NetConfig,
                 seed: int = 0, n_samples: int = 1, n_intervals: int = 1) -> np.ndarray:
    """Pathwise Euler-Maruyama samples.

    Draws ``phi_0 ~ g0`` by reparameterization, then per substep
    ``phi <- phi + dt * drift + tau sqrt(dt) eps`` with standard complex
    ``eps``. Returns complex samples of shape
    ``(n_samples, n_intervals + 1, r)`` at the interval boundaries. Noise is
    drawn from generators keyed by ``(seed, interval, substep)``.
    """
    P = _const(params)
    r2 = 2 * g0.rank
    tau = cfg.tau if cfg.tau is not None else float(np.sqrt(np.exp(P["noise.log_tau2"].value[0])))
    L = _sqrt_psd(g0.cov)
    eps0 = de.keyed_rng(seed, 0, 0).standard_normal((n_samples, r2))
    phi = to_lift(g0.mean)[None] + eps0 @ L.T
    out = np.empty((n_samples, n_intervals + 1, g0.rank), dtype=complex)
    out[:, 0] = to_complex(phi)
    dt = cfg.delta_t
    scale = tau * np.sqrt(0.5 * dt)
    for k in range(n_intervals):
        for p in range(cfg.substeps):
            t = t0 + k * cfg.horizon + p * dt
            d, _ = drift_and_jacobian(P, phi, np.full(n_samples, t), net_cfg, jacobian=False)
            eps = de.keyed_rng(seed, k + 1, p).standard_normal((n_samples, r2))
            phi = phi + dt * d.value + scale * eps
        out[:, k + 1] = to_complex(phi)
    return out


def sample_path(g0: LatentGaussian, params, t0: float, cfg: SdeConfig, net_cfg: NetConfig,
                seed: int = 0) -> np.ndarray:
    """One sample of the latent after a single observation interval."""
    return sample_paths(g0, params, t0, cfg, net_cfg, seed, 1, 1)[0, -1]
