"""Training objective: Gaussian reconstruction NLL, latent KL, consistency.

Everything is computed in the real lift and reduced by the mean over
points, batch elements and transitions, so the weights keep their meaning
across grid sizes and window lengths.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import diffengine as de
from .model import AUTOREGRESSIVE, TEACHER, ModelConfig, unroll
from .nets import to_lift

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class LossWeights:
    w_recon: float = 3.0
    w_kl: float = 1e-3
    w_cons: float = 0.15
    kappa: float = 1e-3

    def __post_init__(self):
        if min(self.w_recon, self.w_kl, self.w_cons, self.kappa) < 0:
            raise ValueError("loss weights must be non-negative")

    def to_dict(self):
        return asdict(self)


def recon_nll_lift(y, mean, var, complex_data=True):
    """Per-point Gaussian NLL, averaged.

    ``y``/``mean``: (..., m, 2); ``var``: (..., m) total variance
    ``E|y - mean|^2``. Complex data: real and imaginary residuals each
    against ``var / 2`` and summed per point. Real data: the real residual
    against ``var``.
    """
    res = de.as_tensor(y) - mean
    if complex_data:
        half = var * 0.5
        r2 = (de.square(res[..., 0]) + de.square(res[..., 1])) / half
        nll = de.log(half) + r2 * 0.5 + LOG_2PI
    else:
        nll = (de.log(var) + de.square(res[..., 0]) / var + LOG_2PI) * 0.5
    return nll.mean()


def recon_nll(y, pred, complex_data=None) -> float:
    """NLL of a complex field ``y`` under a :class:`FieldPrediction`."""
    y = np.asarray(y.values if hasattr(y, "values") else y, dtype=complex)
    mu = np.asarray(pred.mean, dtype=complex)
    var = np.asarray(pred.var, dtype=float)
    if y.shape != mu.shape or var.shape != mu.shape:
        raise ValueError("observation and prediction lengths differ")
    assert np.all(var > 0), "predictive variance must be positive"
    if complex_data is None:
        complex_data = bool(np.any(y.imag != 0) or np.any(mu.imag != 0))
    lift = lambda v: np.stack([v.real, v.imag], -1)
    return float(recon_nll_lift(lift(y), de.Tensor(lift(mu)), de.Tensor(var), complex_data).value)


def latent_kl_lift(mu, logvar):
    """KL to N(0, I) summed over the 2r real-lift coordinates, averaged over rows."""
    kl = (1.0 + logvar - de.square(mu) - de.exp(logvar)).sum(axis=-1) * -0.5
    return kl.mean()


def latent_kl(g) -> float:
    """KL of a diagonal latent Gaussian against the standard prior (real lift)."""
    d = np.diag(g.cov)
    if not np.allclose(g.cov, np.diag(d)):
        raise ValueError("latent_kl expects a diagonal covariance")
    mu = to_lift(g.mean)[None]
    return float(latent_kl_lift(de.Tensor(mu), de.Tensor(np.log(d)[None])).value)


def diag_gauss_kl(mu_p, var_p, mu_q, var_q):
    """``KL(N(mu_p, var_p) || N(mu_q, var_q))`` per row, diagonal, summed over coordinates."""
    diff = mu_p - mu_q
    t = de.log(var_q) - de.log(var_p) + (var_p + de.square(diff)) / var_q - 1.0
    return t.sum(axis=-1) * 0.5


def consistency_lift(mu_enc, var_enc, mu_prop, var_prop, kappa):
    """Mean-squared latent mismatch plus ``kappa`` times the diagonal KL."""
    mse = de.square(mu_enc - mu_prop).mean(axis=-1)
    out = mse
    if kappa:
        out = mse + diag_gauss_kl(mu_enc, var_enc, mu_prop, var_prop) * kappa
    return out.mean()


def consistency(enc, prop, kappa: float) -> float:
    """Consistency between an encoder latent and a propagated latent (diagonal of its covariance)."""
    if enc.rank != prop.rank:
        raise ValueError("latent ranks differ")
    t = lambda a: de.Tensor(np.asarray(a, dtype=float)[None])
    val = consistency_lift(t(to_lift(enc.mean)), t(np.diag(enc.cov)), t(to_lift(prop.mean)),
                           t(np.diag(prop.cov)), kappa)
    return float(val.value)


def _cov_diag(cov):
    n = cov.shape[-1]
    idx = np.arange(n)
    return cov[..., idx, idx]


def total_loss(P, batch, weights: LossWeights, cfg: ModelConfig, mode=TEACHER, rows=None):
    """Weighted objective over a batch of windows.

    ``batch`` is a dict with ``y`` (B, H, m, 2), ``feats`` (m, F) and
    ``t0`` (B,). Returns ``(loss tensor, {term: float})``.
    """
    u = unroll(P, batch["y"], batch["feats"], batch["t0"], cfg, mode, rows=rows,
               encode_targets=weights.w_cons > 0)
    y = np.asarray(batch["y"], dtype=float)
    n = len(u.pred_mean)
    zero = de.Tensor(0.0)
    rec, kl, cons = zero, zero, zero
    for k in range(n):
        if weights.w_recon:
            rec = rec + recon_nll_lift(y[:, k + 1], u.pred_mean[k], u.pred_var[k],
                                       cfg.complex_data)
        if weights.w_kl:
            kl = kl + latent_kl_lift(u.enc_in_mu[k], u.enc_in_lv[k])
        if weights.w_cons:
            cons = cons + consistency_lift(u.target_mu[:, k], de.exp(u.target_lv[:, k]),
                                           u.prop_mu[k], _cov_diag(u.prop_cov[k]),
                                           weights.kappa)
    rec, kl, cons = rec * (1.0 / n), kl * (1.0 / n), cons * (1.0 / n)
    loss = rec * weights.w_recon + kl * weights.w_kl + cons * weights.w_cons
    terms = {"recon": float(rec.value), "kl": float(kl.value), "cons": float(cons.value)}
    return loss, terms


__all__ = ["LossWeights", "recon_nll", "recon_nll_lift", "latent_kl", "latent_kl_lift",
           "consistency", "consistency_lift", "total_loss", "TEACHER", "AUTOREGRESSIVE"]
