"""Ground-truth generators: synthetic modal sequence, Gray-Scott, 2-D vorticity.

Each generator returns a :class:`~snode_dmd.core.Dataset` with noiseless
truth on the full grid and sparse (optionally noisy) observations at a
single time-invariant sensor set. All model-facing time axes use a
snapshot spacing ``dt``; the physical spacing is recorded in ``meta``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .core import CoordSet, Dataset, Spectrum, grid_coords
from .diffengine import keyed_rng


class SimulationError(RuntimeError):
    pass


def _cfg_dict(cfg):
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(cfg).items()}


# -- sensors -----------------------------------------------------------------

def sensor_count(fraction: float, n: int) -> int:
    return int(math.floor(fraction * n))


def sample_sensors(n: int, fraction: float, seed: int) -> np.ndarray:
    """``floor(fraction * n)`` distinct indices, drawn once, returned sorted."""
    if not 0 < fraction <= 1:
        raise ValueError("sensor fraction must lie in (0, 1]")
    m = sensor_count(fraction, n)
    if m == 0:
        raise ValueError(f"fraction {fraction} of {n} points selects no sensors")
    rng = keyed_rng(seed, 101)
    return np.sort(rng.choice(n, size=m, replace=False))


def add_noise(values, sigma: float, seed: int, complex_noise: bool = True):
    """Additive Gaussian noise; complex noise splits ``sigma^2`` evenly over real/imag."""
    values = np.asarray(values, dtype=complex)
    if sigma == 0:
        return values.copy()
    rng = keyed_rng(seed, 102)
    if complex_noise:
        z = rng.standard_normal(values.shape + (2,)) * (sigma / np.sqrt(2.0))
        return values + z[..., 0] + 1j * z[..., 1]
    return values + sigma * rng.standard_normal(values.shape)


def subsample(truth, fraction: float, seed: int, noise_sigma: float = 0.0,
              complex_noise: bool = True):
    """Observe a (p, n) truth sequence at one random sensor set.

    Returns ``(observations (p, m), sensor indices)``.
    """
    truth = np.asarray(truth, dtype=complex)
    idx = sample_sensors(truth.shape[1], fraction, seed)
    obs = add_noise(truth[:, idx], noise_sigma, seed, complex_noise)
    return obs, idx


# -- synthetic modal sequence ---------------------------------------------------

@dataclass
class SynthConfig:
    grid: int = 32
    T: int = 50
    dt_eff: float = 0.1
    alphas: tuple = (-0.01, -0.05, -0.20, -0.01)
    omegas: tuple = (2.00, 4.00, 1.00, 0.30)
    b: tuple = (1.0 + 0.5j, 0.8 - 0.3j, 0.7 + 0.2j, 0.2 + 0.0j)
    noise_sigma: float = 0.1
    sensor_fraction: float = 0.1

    def __post_init__(self):
        if not (len(self.alphas) == len(self.omegas) == len(self.b) == 4):
            raise ValueError("the synthetic benchmark has exactly four modes")
        self.b = tuple(complex(*v) if isinstance(v, (list, tuple)) else complex(v)
                       for v in self.b)


def synthetic_modes(coords) -> np.ndarray:
    """The four fixed spatial modes evaluated at (n, 2) coordinates."""
    x, y = coords[:, 0], coords[:, 1]
    return np.stack([
        np.sin(0.5 * np.pi * (x + 1)) * np.cos(0.5 * np.pi * (y + 1)),
        np.cos(np.pi * (x + 1)) * np.sin(np.pi * (y + 1)),
        np.sin(2 * np.pi * x) * np.sin(2 * np.pi * y),
        np.full_like(x, 0.5),
    ], axis=1)


def gen_synthetic(cfg: SynthConfig | None = None, seed: int = 0) -> Dataset:
    cfg = cfg or SynthConfig()
    coords = grid_coords(cfg.grid)
    modes = synthetic_modes(coords)
    lam = np.array(cfg.alphas) + 1j * np.array(cfg.omegas)
    b = np.array(cfg.b, dtype=complex)
    steps = np.arange(cfg.T)
    phi = b[None, :] * np.exp(lam[None, :] * steps[:, None] * cfg.dt_eff)
    truth = phi @ modes.T.astype(complex)
    obs, idx = subsample(truth, cfg.sensor_fraction, seed, cfg.noise_sigma, True)
    return Dataset(
        system="synthetic", grid=CoordSet(coords), grid_shape=(cfg.grid, cfg.grid),
        sensor_indices=idx, observations=obs, times=steps * cfg.dt_eff, dt=cfg.dt_eff,
        seed=seed, noise_sigma=cfg.noise_sigma, truth=truth,
        gt_spectrum=Spectrum(lam, cfg.dt_eff, modes=modes.astype(complex)),
        meta={"complex": True, "sensor_fraction": cfg.sensor_fraction, "dt_eff": cfg.dt_eff,
              "b": [[v.real, v.imag] for v in b], "config": _cfg_dict(cfg)},
    )


# -- Gray-Scott ---------------------------------------------------------------------

@dataclass
class GrayScottConfig:
    grid: int = 100
    dx: float = 0.01
    Du: float = 2e-4
    Dv: float = 1e-5
    F: float = 0.035
    k: float = 0.065
    F_sigma: float = 1e-3
    T: int = 100
    dt: float = 1.0
    steps_per_snapshot: int = 1
    out_grid: int | None = None
    sensor_fraction: float = 0.1
    noise_sigma: float = 0.0
    model_dt: float = 0.1


def grayscott_stable_dt(cfg: GrayScottConfig) -> float:
    """Largest explicit step allowed by the diffusion limit ``dx^2 / (4 max D)``."""
    return cfg.dx ** 2 / (4.0 * max(cfg.Du, cfg.Dv))


def _stride(n, out):
    if out is None or out == n:
        return 1
    if n % out:
        raise ValueError(f"output grid {out} must divide simulation grid {n}")
    return n // out


def gen_grayscott(cfg: GrayScottConfig | None = None, seed: int = 0) -> Dataset:
    """Forward-Euler Gray-Scott on a periodic grid; the observable is ``v``."""
    cfg = cfg or GrayScottConfig()
    n = cfg.grid
    limit = grayscott_stable_dt(cfg)
    dt = min(cfg.dt, limit)
    steps = cfg.steps_per_snapshot
    if steps < 1:
        raise ValueError("steps_per_snapshot must be >= 1")
    coords = grid_coords(n, periodic=True)
    X = coords[:, 0].reshape(n, n)
    Y = coords[:, 1].reshape(n, n)
    u = 0.9 + 0.1 * np.sin(4 * np.pi * X) * np.cos(2 * np.pi * Y)
    v = 0.1 + 0.05 * np.sin(np.pi * X)
    F = cfg.F + cfg.F_sigma * keyed_rng(seed, 201).standard_normal((n, n))
    s = _stride(n, cfg.out_grid)
    frames = []
    for t in range(cfg.T):
        if t > 0:
            u, v = kernels.grayscott_steps(u, v, F, cfg.Du, cfg.Dv, cfg.k, dt, cfg.dx, steps)
            if not (np.isfinite(u).all() and np.isfinite(v).all()):
                raise SimulationError(f"Gray-Scott blew up before snapshot {t}")
        frames.append(v[::s, ::s].ravel().copy())
    truth = np.asarray(frames, dtype=complex)
    m = n // s
    grid = coords.reshape(n, n, 2)[::s, ::s].reshape(-1, 2)
    obs, idx = subsample(truth, cfg.sensor_fraction, seed, cfg.noise_sigma, False)
    return Dataset(
        system="grayscott", grid=CoordSet(grid), grid_shape=(m, m), sensor_indices=idx,
        observations=obs, times=np.arange(cfg.T) * cfg.model_dt, dt=cfg.model_dt, seed=seed,
        noise_sigma=cfg.noise_sigma, truth=truth,
        meta={"complex": False, "sensor_fraction": cfg.sensor_fraction,
              "effective_dt": dt, "steps_per_snapshot": steps,
              "physical_snapshot_interval": dt * steps,
              "config": _cfg_dict(cfg)},
    )


# -- 2-D vorticity ------------------------------------------------------------------

@dataclass
class VorticityConfig:
    grid: int = 128
    nu: float = 1e-3
    dt: float = 1e-3
    save_every: int = 100
    T_final: float = 10.0
    T: int | None = None
    peak_k: float = 2.0
    rms: float = 1.0
    out_grid: int | None = None
    sensor_fraction: float = 0.1
    noise_sigma: float = 0.0

    @property
    def n_snapshots(self) -> int:
        """Explicit ``T`` if given, else ``T_final / dt_save`` frames starting at 0."""
        if self.T is not None:
            return self.T
        return int(round(self.T_final / (self.dt * self.save_every)))


def _rfft_wavenumbers(n):
    kx = np.fft.rfftfreq(n, d=1.0 / n)
    ky = np.fft.fftfreq(n, d=1.0 / n)
    return np.meshgrid(kx, ky)


def initial_vorticity(n: int, peak_k: float, rms: float, seed: int) -> np.ndarray:
    """Zero-mean random field, band-filtered with amplitude ``(k/k0)^2 exp(-(k/k0)^2)``."""
    noise = keyed_rng(seed, 301).standard_normal((n, n))
    kx, ky = _rfft_wavenumbers(n)
    k = np.sqrt(kx ** 2 + ky ** 2)
    filt = (k / peak_k) ** 2 * np.exp(-((k / peak_k) ** 2))
    w_hat = np.fft.rfft2(noise) * filt
    w_hat[0, 0] = 0.0
    w = np.fft.irfft2(w_hat, s=(n, n))
    return w * (rms / np.sqrt(np.mean(w ** 2)))


class VorticitySolver:
    """Pseudo-spectral vorticity solver on ``[0, 2 pi)^2``.

    Advection is dealiased (2/3 rule) and integrated with classical RK4;
    diffusion is Crank-Nicolson:
    ``w_new = ((1 - a) w + dt N_rk4) / (1 + a)`` with ``a = nu k^2 dt / 2``.
    """

    def __init__(self, n: int, nu: float, dt: float):
        if n & (n - 1):
            raise ValueError("grid size must be a power of two")
        self.n, self.nu, self.dt = n, nu, dt
        self.kx, self.ky = _rfft_wavenumbers(n)
        self.k2 = self.kx ** 2 + self.ky ** 2
        kmax = n // 2
        self.mask = (np.abs(self.kx) < 2.0 / 3.0 * kmax) & (np.abs(self.ky) < 2.0 / 3.0 * kmax)
        k2s = np.where(self.k2 == 0, 1.0, self.k2)
        self.inv_k2 = np.where(self.k2 == 0, 0.0, 1.0 / k2s)
        a = 0.5 * nu * dt * self.k2
        self.cn_num = 1.0 - a
        self.cn_den = 1.0 + a
        self.h = 2 * np.pi / n

    def velocity(self, w_hat):
        psi = w_hat * self.inv_k2
        s = (self.n, self.n)
        return (np.fft.irfft2(1j * self.ky * psi, s=s), np.fft.irfft2(-1j * self.kx * psi, s=s))

    def advection(self, w_hat):
        s = (self.n, self.n)
        u, v = self.velocity(w_hat)
        wx = np.fft.irfft2(1j * self.kx * w_hat, s=s)
        wy = np.fft.irfft2(1j * self.ky * w_hat, s=s)
        N = np.fft.rfft2(-(u * wx + v * wy)) * self.mask
        N[0, 0] = 0.0  # divergence form: the mean mode has no source
        return N

    def step(self, w_hat):
        dt = self.dt
        k1 = self.advection(w_hat)
        k2 = self.advection(w_hat + 0.5 * dt * k1)
        k3 = self.advection(w_hat + 0.5 * dt * k2)
        k4 = self.advection(w_hat + dt * k3)
        nbar = (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
        return (self.cn_num * w_hat + dt * nbar) / self.cn_den

    def cfl(self, w_hat):
        u, v = self.velocity(w_hat)
        return float(max(np.abs(u).max(), np.abs(v).max()) * self.dt / self.h)

    def energy(self, w_hat):
        u, v = self.velocity(w_hat)
        return 0.5 * float(np.sum(u ** 2 + v ** 2))

    def run(self, w0, n_steps: int, save_every: int):
        """Integrate from ``w0``; returns frames at steps 0, save_every, ... (inclusive)."""
        w_hat = np.fft.rfft2(np.asarray(w0, dtype=float))
        w_hat[0, 0] = 0.0
        frames = [np.fft.irfft2(w_hat, s=(self.n, self.n))]
        if self.cfl(w_hat) > 1:
            warnings.warn(f"CFL number {self.cfl(w_hat):.2f} exceeds 1", RuntimeWarning)
        for s in range(1, n_steps + 1):
            w_hat = self.step(w_hat)
            if s % save_every == 0:
                w = np.fft.irfft2(w_hat, s=(self.n, self.n))
                if not np.isfinite(w).all():
                    raise SimulationError(f"vorticity solver blew up at step {s}")
                if self.cfl(w_hat) > 1:
                    warnings.warn(f"CFL number exceeds 1 at step {s}", RuntimeWarning)
                frames.append(w)
        return frames


def resample_periodic(f, n_out: int) -> np.ndarray:
    """Bilinear resampling of a periodic n x n field onto an n_out x n_out grid."""
    f = np.asarray(f, dtype=float)
    n = f.shape[0]
    if n_out == n:
        return f.copy()
    g = np.arange(n_out) * (n / n_out)
    i0 = np.floor(g).astype(int)
    t = g - i0
    i1 = (i0 + 1) % n
    i0 %= n
    rows = (1 - t)[:, None] * f[i0] + t[:, None] * f[i1]
    return (1 - t)[None, :] * rows[:, i0] + t[None, :] * rows[:, i1]


def gen_vorticity(cfg: VorticityConfig | None = None, seed: int = 0, nu: float | None = None,
                  w0=None) -> Dataset:
    """Decaying 2-D turbulence snapshots; coordinates normalized to ``[-1, 1)^2``."""
    cfg = cfg or VorticityConfig()
    nu = cfg.nu if nu is None else nu
    n = cfg.grid
    if w0 is None:
        w0 = initial_vorticity(n, cfg.peak_k, cfg.rms, seed)
    solver = VorticitySolver(n, nu, cfg.dt)
    frames = solver.run(w0, (cfg.n_snapshots - 1) * cfg.save_every, cfg.save_every)
    out = cfg.out_grid or n
    frames = [resample_periodic(w, out) for w in frames]
    truth = np.asarray([w.ravel() for w in frames], dtype=complex)
    obs, idx = subsample(truth, cfg.sensor_fraction, seed, cfg.noise_sigma, False)
    dt_save = cfg.dt * cfg.save_every
    return Dataset(
        system="vorticity", grid=CoordSet(grid_coords(out, periodic=True)),
        grid_shape=(out, out), sensor_indices=idx, observations=obs,
        times=np.arange(cfg.n_snapshots) * dt_save, dt=dt_save, seed=seed, noise_sigma=cfg.noise_sigma,
        truth=truth,
        meta={"complex": False, "sensor_fraction": cfg.sensor_fraction, "nu": nu,
              "domain": [0.0, 2 * np.pi], "sim_grid": n, "config": _cfg_dict(cfg)},
    )


def gen_vorticity_ensemble(cfg: VorticityConfig | None, seed: int, n_realizations: int,
                           nu_range=(1e-3, 5e-2)) -> list:
    """Realizations sharing one initial field, with viscosity drawn log-uniformly.

    A single realization uses the configured viscosity.
    """
    cfg = cfg or VorticityConfig()
    w0 = initial_vorticity(cfg.grid, cfg.peak_k, cfg.rms, seed)
    if n_realizations == 1:
        return [gen_vorticity(cfg, seed, w0=w0)]
    lo, hi = np.log(nu_range[0]), np.log(nu_range[1])
    nus = np.exp(keyed_rng(seed, 302).uniform(lo, hi, n_realizations))
    return [gen_vorticity(cfg, seed, nu=float(v), w0=w0) for v in nus]


SYSTEMS = {
    "synthetic": (SynthConfig, gen_synthetic),
    "grayscott": (GrayScottConfig, gen_grayscott),
    "vorticity": (VorticityConfig, gen_vorticity),
}
