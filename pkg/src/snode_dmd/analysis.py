"""Exact-DMD baseline, evaluation metrics, mode portraits and particle advection."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import kernels, spectral
from .core import Dataset, Field, complex_svd, write_json
from .model import AUTOREGRESSIVE, TEACHER, ModelConfig, rollout
from .nets import eval_modes
from .sde import sample_paths


# -- exact DMD ----------------------------------------------------------------------

@dataclass(frozen=True)
class DmdResult:
    A_tilde: np.ndarray
    modes: np.ndarray
    mus: np.ndarray
    lambdas: np.ndarray
    amplitudes: np.ndarray
    residual: float
    rank: int


def _snapshot_matrix(snapshots) -> np.ndarray:
    if isinstance(snapshots, np.ndarray):
        X = np.asarray(snapshots, dtype=complex)
    else:
        X = np.stack([np.asarray(s.values if isinstance(s, Field) else s, dtype=complex)
                      for s in snapshots])
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("exact_dmd needs at least 2 snapshots")
    return X.T  # (m, p): columns are snapshots


def exact_dmd(snapshots, rank: int, dt: float = 1.0) -> DmdResult:
    """SVD-truncated exact DMD of a snapshot sequence.

    ``snapshots``: sequence of Fields / vectors, or a (p, m) array with
    time along axis 0.
    """
    if rank < 1:
        raise ValueError("rank must be >= 1")
    X = _snapshot_matrix(snapshots)
    Y, Yp = X[:, :-1], X[:, 1:]
    U, s, V = complex_svd(Y)
    keep = int(np.sum(s > 1e-12 * s[0])) if s.size and s[0] > 0 else 0
    if keep == 0:
        raise ValueError("data matrix is zero")
    if rank > keep:
        warnings.warn(f"rank {rank} exceeds numerical data rank {keep}; reduced", RuntimeWarning)
        rank = keep
    U, s, V = U[:, :rank], s[:rank], V[:, :rank]
    B = Yp @ V / s
    A_tilde = U.conj().T @ B
    mus, W = np.linalg.eig(A_tilde)
    modes = B @ W
    nrm = np.linalg.norm(modes, axis=0)
    modes = modes / np.where(nrm > 0, nrm, 1.0)
    amplitudes = np.linalg.lstsq(modes, X[:, 0], rcond=None)[0]
    residual = float(np.linalg.norm(Yp - B @ (U.conj().T @ Y)) / max(np.linalg.norm(Yp), 1e-300))
    with np.errstate(divide="ignore"):
        lambdas = np.log(mus.astype(complex)) / dt
    return DmdResult(A_tilde, modes, mus, lambdas, amplitudes, residual, rank)


# -- metrics ------------------------------------------------------------------------

def _values(seq):
    if isinstance(seq, np.ndarray):
        return np.asarray(seq, dtype=complex)
    return np.stack([np.asarray(getattr(s, "values", getattr(s, "mean", s)), dtype=complex)
                     for s in seq])


def l1_error(pred, truth, complex_data: bool | None = None) -> float:
    """Time- and point-averaged absolute error.

    Complex data use ``|pred - truth|``; real data compare real parts.
    """
    P, T = _values(pred), _values(truth)
    if P.shape != T.shape:
        raise ValueError(f"prediction {P.shape} and truth {T.shape} are misaligned")
    if complex_data is None:
        complex_data = bool(np.any(T.imag != 0))
    d = P - T if complex_data else P.real - T.real
    return float(np.mean(np.abs(d)))


@dataclass
class ModeMatchReport:
    permutation: np.ndarray
    phases: np.ndarray
    cosines: np.ndarray
    mean_cosine: float

    def to_dict(self):
        return {"permutation": self.permutation.tolist(), "phases": self.phases.tolist(),
                "cosines": self.cosines.tolist(), "mean_cosine": self.mean_cosine}


def mode_similarity(W_hat, W_gt) -> ModeMatchReport:
    """Hungarian matching of learned to reference modes by phase-aligned cosine."""
    A = np.asarray(W_hat, dtype=complex)
    B = np.asarray(W_gt, dtype=complex)
    if A.shape != B.shape:
        raise ValueError(f"mode matrices differ in shape: {A.shape} vs {B.shape}")
    na, nb = np.linalg.norm(A, axis=0), np.linalg.norm(B, axis=0)
    if np.any(na == 0) or np.any(nb == 0):
        warnings.warn("zero-norm mode column scored 0", RuntimeWarning)
    inner = A.conj().T @ B                              # <W_hat_k, W_j>
    denom = np.outer(na, nb)
    C = np.where(denom > 0, np.abs(inner) / np.where(denom > 0, denom, 1.0), 0.0)
    C = np.clip(C, 0.0, 1.0)
    rows, cols = linear_sum_assignment(-C)
    perm = cols[np.argsort(rows)]
    k = np.arange(A.shape[1])
    cos = C[k, perm]
    phases = -np.angle(inner[k, perm])
    return ModeMatchReport(perm, phases, cos, float(cos.mean()))


def _unwrap_increments(z):
    """Per-step log ratios with each phase step kept within pi of the previous one."""
    ratio = z[1:] / z[:-1]
    logs = np.log(ratio)
    out = logs.copy()
    for i in range(1, len(out)):
        prev = out[i - 1].imag
        d = out[i].imag - prev
        out[i] = out[i].real + 1j * (prev + (d + np.pi) % (2 * np.pi) - np.pi)
    return out


def eigen_log_ratio(phi_traj, dt: float, floor: float = 1e-12) -> np.ndarray:
    """Continuous eigenvalue per mode from consecutive coefficient ratios.

    ``phi_traj``: (T, r) complex. Returns (r,) complex; a mode whose
    magnitudes all fall below ``floor`` is reported as ``nan``.
    """
    Z = np.asarray(phi_traj, dtype=complex)
    if Z.ndim == 1:
        Z = Z[:, None]
    if Z.shape[0] < 2:
        raise ValueError("need at least 2 trajectory points")
    out = np.full(Z.shape[1], np.nan + 1j * np.nan)
    for k in range(Z.shape[1]):
        z = Z[:, k]
        ok = np.abs(z) > floor
        good = ok[1:] & ok[:-1]
        if not good.any():
            continue
        # use the longest runs of valid consecutive points
        incs = []
        run = []
        for i in range(len(z)):
            if ok[i]:
                run.append(z[i])
            else:
                if len(run) > 1:
                    incs.append(_unwrap_increments(np.array(run)))
                run = []
        if len(run) > 1:
            incs.append(_unwrap_increments(np.array(run)))
        lam = np.concatenate(incs) / dt
        out[k] = np.median(lam.real) + 1j * np.median(lam.imag)
    return out


def eigen_errors(lam_hat, lam_gt):
    """Absolute errors after Hungarian matching on ``|lam_hat - lam_gt|``."""
    a = np.asarray(lam_hat, dtype=complex)
    b = np.asarray(lam_gt, dtype=complex)
    C = np.abs(a[:, None] - b[None, :])
    C = np.where(np.isfinite(C), C, 1e12)
    rows, cols = linear_sum_assignment(C)
    perm = cols[np.argsort(rows)]
    return C[np.arange(len(a)), perm], perm


@dataclass
class PortraitLevels:
    levels: np.ndarray       # (r, len(percentiles))
    degenerate: np.ndarray   # (r,) bool


def mode_portrait_levels(W, phi_traj, percentiles=(30, 60, 90), flat_tol: float = 1e-6):
    """Percentile levels of the pooled ``|W_k(x) phi_k(t)|`` per mode.

    Uses linear interpolation between order statistics. A mode is flagged
    degenerate when its pooled magnitudes span less than ``flat_tol``
    relative to their maximum.
    """
    W = np.asarray(W, dtype=complex)
    Z = np.asarray(phi_traj, dtype=complex)
    if Z.ndim == 1:
        Z = Z[None]
    if W.shape[1] != Z.shape[1]:
        raise ValueError("modes and trajectory disagree on rank")
    r = W.shape[1]
    levels = np.zeros((r, len(percentiles)))
    degen = np.zeros(r, dtype=bool)
    for k in range(r):
        pool = np.abs(np.outer(W[:, k], Z[:, k])).ravel()
        levels[k] = np.percentile(pool, percentiles, method="linear")
        top = pool.max()
        degen[k] = top == 0 or (top - pool.min()) <= flat_tol * top
    return PortraitLevels(levels, degen)


# -- trained-model evaluation -------------------------------------------------------

@dataclass
class GridForecast:
    """Full-grid predictive means for frames ``start + 1 .. start + horizon``."""

    mean: np.ndarray             # (horizon, n) complex
    encoded: np.ndarray          # (horizon, r) encoded latent means (inputs)
    propagated: np.ndarray       # (horizon, r) propagated latent means
    modes: np.ndarray            # (n, r) modes on the evaluation grid
    start: int = 0


def forecast_grid(params, cfg: ModelConfig, ds: Dataset, mode=TEACHER, horizon=None,
                  start: int = 0, coords=None) -> GridForecast:
    """Roll the model from frame ``start`` and decode the means on a full grid.

    Teacher-forced mode gives 1-step predictions of every frame; the
    autoregressive mode gives the m-step forecast from frame ``start``.
    """
    p = ds.observations.shape[0]
    horizon = p - 1 - start if horizon is None else horizon
    if horizon < 1 or start + horizon > p - 1:
        raise ValueError("horizon exceeds the dataset")
    obs = ds.observations[start:start + horizon + 1]
    res = rollout(obs[0], ds.sensors, horizon, params, cfg, mode, observations=obs,
                  t0=float(ds.times[start]))
    W = eval_modes(params, ds.grid.coords if coords is None else coords, cfg.net)
    prop = np.stack([g.mean for g in res.latents_propagated])
    enc = np.stack([g.mean for g in res.latents_encoded])
    return GridForecast(prop @ W.T, enc, prop, W, start)


def forecast_l1(params, cfg: ModelConfig, ds: Dataset, mode=TEACHER, horizon=None,
                start: int = 0) -> float:
    """Full-grid L1 of a forecast against the noiseless truth."""
    fc = forecast_grid(params, cfg, ds, mode, horizon, start)
    truth = ds.truth[start + 1:start + 1 + fc.mean.shape[0]]
    return l1_error(fc.mean, truth, ds.is_complex)


# -- flow diagnostics ---------------------------------------------------------------

def _square(values):
    v = np.asarray(getattr(values, "values", values))
    if v.ndim == 1:
        n = int(round(np.sqrt(v.size)))
        if n * n != v.size:
            raise ValueError("field is not square")
        v = v.reshape(n, n)
    return np.real(v).astype(float)


def velocity_from_vorticity(omega, L: float = 2 * np.pi):
    """Divergence-free velocity ``(u, v)`` of a periodic vorticity field (mean removed)."""
    w = _square(omega)
    n = w.shape[0]
    if n & (n - 1):
        raise ValueError("grid size must be a power of two")
    w = w - w.mean()
    kx, ky = spectral.wavenumbers(n, L)
    u_hat, v_hat = spectral.velocity_hat(np.fft.fft2(w), kx, ky)
    return np.real(np.fft.ifft2(u_hat)), np.real(np.fft.ifft2(v_hat))


def advect_particle(start, U, V, dt: float, steps: int, frame_dt: float | None = None,
                    L: float = 2 * np.pi) -> np.ndarray:
    """RK4 trajectory of a massless particle through time-indexed velocity frames.

    ``U``/``V``: (K, n, n) or (n, n) arrays indexed ``[t, iy, ix]`` on the
    periodic box ``[0, L)^2``. Frames are ``frame_dt`` apart (default
    ``dt``) and linearly interpolated in time. Returns (steps + 1, 2).
    """
    U = np.asarray(U, dtype=float)
    V = np.asarray(V, dtype=float)
    if U.ndim == 2:
        U, V = U[None], V[None]
    return kernels.advect_rk4(U, V, start[0], start[1], dt, steps,
                              dt if frame_dt is None else frame_dt, L)


def ensemble_dispersion(endpoints, L: float | None = 2 * np.pi) -> float:
    """Mean pairwise distance between trajectory endpoints (periodic if ``L``)."""
    P = np.asarray(endpoints, dtype=float)
    if len(P) < 2:
        return 0.0
    d = P[:, None, :] - P[None, :, :]
    if L:
        d = (d + L / 2) % L - L / 2
    dist = np.sqrt((d ** 2).sum(-1))
    iu = np.triu_indices(len(P), 1)
    return float(dist[iu].mean())


def posterior_vorticity(params, cfg: ModelConfig, ds: Dataset, n_samples: int, seed: int,
                        horizon: int | None = None, start: int = 0) -> np.ndarray:
    """Sampled full-grid fields ``(n_samples, horizon + 1, n)`` (real part).

    The latent at ``start`` is the encoding of that frame's observations;
    each sample draws its own initial latent and SDE noise path.
    """
    p = ds.observations.shape[0]
    horizon = p - 1 - start if horizon is None else horizon
    obs = ds.observations[start:start + 2]
    res = rollout(obs[0], ds.sensors, 1, params, cfg, TEACHER, observations=obs,
                  t0=float(ds.times[start]))
    g0 = res.latents_encoded[0]
    paths = sample_paths(g0, params, float(ds.times[start]), cfg.sde, cfg.net, seed,
                         n_samples, horizon)
    W = eval_modes(params, ds.grid.coords, cfg.net)
    return np.real(paths @ W.T)


def trajectory_ensemble(fields, grid_shape, start, frame_dt: float, substeps: int = 10,
                        L: float = 2 * np.pi):
    """Advect one particle through each sampled vorticity sequence.

    ``fields``: (N, K, n) vorticity samples on a periodic grid; ``start`` in
    box coordinates ``[0, L)^2``. Returns (N, steps + 1, 2) trajectories.
    """
    fields = np.asarray(fields, dtype=float)
    ny, nx = grid_shape
    trajs = []
    for sample in fields:
        vel = [velocity_from_vorticity(w.reshape(ny, nx), L) for w in sample]
        U = np.stack([u for u, _ in vel])
        V = np.stack([v for _, v in vel])
        steps = (len(sample) - 1) * substeps
        trajs.append(advect_particle(start, U, V, frame_dt / substeps, steps, frame_dt, L))
    return np.stack(trajs)


# -- reports ------------------------------------------------------------------------

def write_report(out_dir, name: str, metrics: dict) -> Path:
    """Write ``metrics`` as ``name.json`` and a flat two-column ``name.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / f"{name}.json", metrics)
    rows = []

    def flatten(prefix, obj):
        if isinstance(obj, dict):
            for k, v in obj.items():
                flatten(f"{prefix}.{k}" if prefix else str(k), v)
        elif isinstance(obj, (list, tuple, np.ndarray)) and not isinstance(obj, str):
            for i, v in enumerate(obj):
                flatten(f"{prefix}[{i}]", v)
        else:
            rows.append((prefix, obj))

    flatten("", json.loads((out / f"{name}.json").read_text()))
    with open(out / f"{name}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        w.writerows(rows)
    return out / f"{name}.json"


def write_trajectories(path, trajectories) -> None:
    """CSV with columns sample_id, step, x, y."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "step", "x", "y"])
        for sid, traj in enumerate(trajectories):
            for k, (x, y) in enumerate(np.asarray(traj)):
                w.writerow([sid, k, repr(float(x)), repr(float(y))])
