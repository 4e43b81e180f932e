"""Full generative pass: encode a sparse field, evolve the latent, decode.

The tensor-level :func:`unroll` is shared by the training loss and by the
numpy-level evaluation API (:func:`step`, :func:`rollout`,
:func:`reconstruct_at`).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffengine as de
from .core import CoordSet, Field
from .nets import (NetConfig, encoder, eval_modes, lift_rows, mode_net, positional_encode,
                   to_complex)
from .sde import LatentGaussian, SdeConfig, propagate_lift

TEACHER = "teacher_forced"
AUTOREGRESSIVE = "autoregressive"


@dataclass
class ModelConfig:
    net: NetConfig = field(default_factory=NetConfig)
    dt: float = 0.1
    substeps: int = 5
    tau: float | None = None
    complex_data: bool = True

    @property
    def sde(self) -> SdeConfig:
        return SdeConfig.for_interval(self.dt, self.substeps, self.tau)

    def to_dict(self):
        d = asdict(self)
        d["net"] = self.net.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["net"] = NetConfig.from_dict(d["net"])
        return cls(**d)


@dataclass(frozen=True)
class FieldPrediction:
    """Predictive mean (complex) and variance ``E|y - mean|^2`` per point."""

    mean: np.ndarray
    var: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        if np.any(np.asarray(self.var) <= 0):
            raise ValueError("predictive variance must be positive")


@dataclass
class RolloutResult:
    predictions: list
    latents_encoded: list
    latents_propagated: list
    mode_matrix: np.ndarray
    mode: str = TEACHER


def as_params(params):
    """Tensor dict for ``params``: leaves stay as given, a ParamStore becomes constants."""
    if isinstance(params, dict):
        return params
    return {n: de.Tensor(params[n]) for n in params.names}


def lift_field(values):
    values = np.asarray(values, dtype=complex)
    return np.stack([values.real, values.imag], axis=-1)


def diag_cov(var):
    """(B, 2r) variances -> (B, 2r, 2r) diagonal covariance tensor."""
    n = var.shape[-1]
    return de.reshape(var, (var.shape[0], n, 1)) * np.eye(n)


def decode_lift(a, b, mu, cov, log_sigma2):
    """Mean (B, m, 2) and variance (B, m) of ``W phi + eta``."""
    mean = de.stack([mu @ a.T, mu @ b.T], axis=-1)
    va = ((a @ cov) * a).sum(axis=-1)
    vb = ((b @ cov) * b).sum(axis=-1)
    var = va + vb + de.exp(log_sigma2)
    return mean, var


def decode(g: LatentGaussian, W, sigma_obs2: float, time: float = 0.0) -> FieldPrediction:
    """``mean = W mu``; ``var_i = w_i^H Sigma w_i + sigma_obs2`` (Sigma from the real lift)."""
    W = np.asarray(W, dtype=complex)
    if W.ndim != 2 or W.shape[1] != g.rank:
        raise ValueError(f"mode matrix shape {W.shape} does not match latent rank {g.rank}")
    O = np.stack([W.real, W.imag], axis=-1).reshape(W.shape[0], -1)
    a, b = lift_rows(de.Tensor(O))
    mu = de.Tensor(np.stack([g.mean.real, g.mean.imag], -1).reshape(1, -1))
    mean, var = decode_lift(a, b, mu, de.Tensor(g.cov[None]),
                           de.Tensor(np.log([sigma_obs2])))
    return FieldPrediction(mean.value[0, :, 0] + 1j * mean.value[0, :, 1], var.value[0], time)


@dataclass
class Unrolled:
    """Per-transition tensors from :func:`unroll`; time index k runs over transitions."""

    enc_in_mu: list
    enc_in_lv: list
    prop_mu: list
    prop_cov: list
    pred_mean: list
    pred_var: list
    target_mu: de.Tensor | None = None
    target_lv: de.Tensor | None = None


def sensor_rows(P, feats, cfg: ModelConfig):
    O = mode_net(P, feats, cfg.net)
    return lift_rows(O)


def unroll(P, y_seq, feats, t0, cfg: ModelConfig, mode=TEACHER, rows=None,
           encode_targets=True) -> Unrolled:
    """Run the model over ``H - 1`` transitions of a batch of sequences.

    ``y_seq``: (B, H, m, 2) observations in the real lift; ``feats``: (m, F)
    encoded sensor coordinates; ``t0``: (B,) start times. In teacher-forced
    mode every input is data and the whole window is encoded/propagated in
    one batched pass. In autoregressive mode the input after the first
    frame is the predicted mean at the sensors (real part only for real
    data). Data encodings of frames 1..H-1 are returned as consistency
    targets when ``encode_targets`` is set.
    """
    y_seq = np.asarray(y_seq, dtype=float)
    B, H, m, _ = y_seq.shape
    r2 = 2 * cfg.net.rank
    sde_cfg = cfg.sde
    a, b = sensor_rows(P, feats, cfg) if rows is None else rows
    t0 = np.asarray(t0, dtype=float).reshape(B)
    ls2 = P["noise.log_sigma2"]
    out = Unrolled([], [], [], [], [], [])

    if mode == TEACHER:
        mu_all, lv_all = encoder(P, y_seq.reshape(B * H, m, 2), feats, cfg.net)
        mu_all = de.reshape(mu_all, (B, H, r2))
        lv_all = de.reshape(lv_all, (B, H, r2))
        mu_in = de.reshape(mu_all[:, :-1], (B * (H - 1), r2))
        lv_in = de.reshape(lv_all[:, :-1], (B * (H - 1), r2))
        tk = (t0[:, None] + cfg.dt * np.arange(H - 1)[None]).reshape(-1)
        mu_p, cov_p = propagate_lift(P, mu_in, diag_cov(de.exp(lv_in)), tk, sde_cfg, cfg.net)
        mean, var = decode_lift(a, b, mu_p, cov_p, ls2)
        mu_p = de.reshape(mu_p, (B, H - 1, r2))
        cov_p = de.reshape(cov_p, (B, H - 1, r2, r2))
        mean = de.reshape(mean, (B, H - 1, m, 2))
        var = de.reshape(var, (B, H - 1, m))
        for k in range(H - 1):
            out.enc_in_mu.append(mu_all[:, k])
            out.enc_in_lv.append(lv_all[:, k])
            out.prop_mu.append(mu_p[:, k])
            out.prop_cov.append(cov_p[:, k])
            out.pred_mean.append(mean[:, k])
            out.pred_var.append(var[:, k])
        if encode_targets:
            out.target_mu = mu_all[:, 1:]
            out.target_lv = lv_all[:, 1:]
        return out

    if mode != AUTOREGRESSIVE:
        raise ValueError(f"unknown rollout mode {mode!r}")
    inp = de.Tensor(y_seq[:, 0])
    for k in range(H - 1):
        mu, lv = encoder(P, inp, feats, cfg.net)
        mu_p, cov_p = propagate_lift(P, mu, diag_cov(de.exp(lv)), t0 + k * cfg.dt, sde_cfg,
                                     cfg.net)
        mean, var = decode_lift(a, b, mu_p, cov_p, ls2)
        out.enc_in_mu.append(mu)
        out.enc_in_lv.append(lv)
        out.prop_mu.append(mu_p)
        out.prop_cov.append(cov_p)
        out.pred_mean.append(mean)
        out.pred_var.append(var)
        inp = mean if cfg.complex_data else mean * np.array([1.0, 0.0])
    if encode_targets:
        mu_t, lv_t = encoder(P, y_seq[:, 1:].reshape(B * (H - 1), m, 2), feats, cfg.net)
        out.target_mu = de.reshape(mu_t, (B, H - 1, r2))
        out.target_lv = de.reshape(lv_t, (B, H - 1, r2))
    return out


# -- numpy-level API ---------------------------------------------------------------

def _latent(mu_row, cov=None, lv_row=None):
    mean = to_complex(mu_row)
    if cov is None:
        cov = np.diag(np.exp(lv_row))
    return LatentGaussian(mean, cov)


def _coords_array(S):
    return S.coords if isinstance(S, CoordSet) else np.asarray(S, dtype=float)


def step(y_in, S, k_time: float, params, cfg: ModelConfig):
    """One transition from the field ``y_in`` observed on ``S`` at time ``k_time``.

    Returns ``(prediction at k+1 on S, encoded latent, propagated latent)``.
    """
    values = y_in.values if isinstance(y_in, Field) else np.asarray(y_in, dtype=complex)
    P = as_params(params)
    feats = positional_encode(_coords_array(S), cfg.net.L)
    y = np.stack([lift_field(values), lift_field(values)])[None, :, :, :]
    u = unroll(P, y, feats, [k_time], cfg, TEACHER, encode_targets=False)
    enc = _latent(u.enc_in_mu[0].value[0], lv_row=u.enc_in_lv[0].value[0])
    prop = _latent(u.prop_mu[0].value[0], u.prop_cov[0].value[0])
    mean = u.pred_mean[0].value[0]
    pred = FieldPrediction(mean[:, 0] + 1j * mean[:, 1], u.pred_var[0].value[0],
                           k_time + cfg.dt)
    return pred, enc, prop


def rollout(y0, S, horizon: int, params, cfg: ModelConfig, mode=TEACHER, observations=None,
            t0: float = 0.0) -> RolloutResult:
    """Predict ``horizon`` steps ahead from ``y0``.

    Teacher-forced mode needs ``observations`` (at least ``horizon + 1``
    frames starting with ``y0``'s frame); autoregressive mode feeds back
    the predicted sensor mean and needs only ``y0``.
    """
    coords = _coords_array(S)
    m = len(coords)
    values0 = y0.values if isinstance(y0, Field) else np.asarray(y0, dtype=complex)
    if mode == TEACHER:
        if observations is None:
            raise ValueError("teacher-forced rollout needs observations")
        obs = np.asarray(observations, dtype=complex)
        if obs.shape[0] < horizon + 1:
            raise ValueError(f"horizon {horizon} exceeds the {obs.shape[0] - 1} available steps")
        obs = obs[: horizon + 1]
    else:
        obs = np.zeros((horizon + 1, m), dtype=complex)
        obs[0] = values0
    P = as_params(params)
    feats = positional_encode(coords, cfg.net.L)
    y = lift_field(obs)[None]
    u = unroll(P, y, feats, [t0], cfg, mode, encode_targets=False)
    preds, enc, prop = [], [], []
    for k in range(horizon):
        mean = u.pred_mean[k].value[0]
        preds.append(FieldPrediction(mean[:, 0] + 1j * mean[:, 1], u.pred_var[k].value[0],
                                     t0 + (k + 1) * cfg.dt))
        enc.append(_latent(u.enc_in_mu[k].value[0], lv_row=u.enc_in_lv[k].value[0]))
        prop.append(_latent(u.prop_mu[k].value[0], u.prop_cov[k].value[0]))
    return RolloutResult(preds, enc, prop, eval_modes(params, coords, cfg.net), mode)


def sigma_obs2(params) -> float:
    P = as_params(params)
    return float(np.exp(P["noise.log_sigma2"].value[0]))


def reconstruct_at(g: LatentGaussian, Q, params, cfg: ModelConfig, time: float = 0.0,
                   chunk: int = 65536) -> FieldPrediction:
    """Decode a latent Gaussian at arbitrary query coordinates."""
    coords = _coords_array(Q)
    s2 = sigma_obs2(params)
    means, vars_ = [], []
    for i in range(0, len(coords), chunk):
        W = eval_modes(params, coords[i:i + chunk], cfg.net)
        p = decode(g, W, s2, time)
        means.append(p.mean)
        vars_.append(p.var)
    return FieldPrediction(np.concatenate(means), np.concatenate(vars_), time)


def mean_fields(latents, W) -> np.ndarray:
    """Stacked predictive means ``W mu_k`` for a sequence of latents, shape (K, m)."""
    mus = np.stack([g.mean for g in latents])
    return mus @ np.asarray(W).T
