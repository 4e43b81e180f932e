"""Learned function families and their parameter layout.

All complex quantities are handled in the real lift: a complex r-vector is
a real 2r-vector ``(re_0, im_0, re_1, im_1, ...)``. The functions here take
a dict of :class:`~snode_dmd.diffengine.Tensor` leaves (``params.leaves()``)
so the same code serves training and evaluation.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffengine as de
from .diffengine import ParamStore


@dataclass
class NetConfig:
    rank: int = 4
    L: int = 6
    dim: int = 2
    mode_hidden: tuple = (128, 128, 128, 128)
    enc_hidden: tuple = (64, 64)
    drift_hidden: tuple = (64, 64)
    zero_drift_output: bool = True
    logvar_bounds: tuple = (-12.0, 4.0)
    init_log_tau2: float = float(np.log(1e-2))
    init_log_sigma2: float = float(np.log(1e-2))

    def __post_init__(self):
        if self.rank < 1 or self.L < 1 or self.dim < 1:
            raise ValueError("rank, L and dim must be >= 1")
        self.mode_hidden = tuple(int(h) for h in self.mode_hidden)
        self.enc_hidden = tuple(int(h) for h in self.enc_hidden)
        self.drift_hidden = tuple(int(h) for h in self.drift_hidden)
        self.logvar_bounds = tuple(float(b) for b in self.logvar_bounds)

    @property
    def features(self) -> int:
        return (2 * self.L + 1) * self.dim

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def positional_encode(s, L: int) -> np.ndarray:
    """Sinusoidal features of coordinates.

    Each coordinate ``s_j`` becomes ``[s_j, sin(2^0 pi s_j), cos(2^0 pi s_j),
    ..., sin(2^(L-1) pi s_j), cos(2^(L-1) pi s_j)]`` and the per-dimension
    blocks are concatenated, giving ``(2L+1) d`` features. Accepts a single
    coordinate of shape (d,) or a batch (m, d).
    """
    s = np.asarray(s, dtype=float)
    single = s.ndim == 1
    s = np.atleast_2d(s)
    freqs = (2.0 ** np.arange(L)) * np.pi
    ang = s[:, :, None] * freqs  # (m, d, L)
    sc = np.stack([np.sin(ang), np.cos(ang)], axis=-1).reshape(s.shape[0], s.shape[1], 2 * L)
    out = np.concatenate([s[:, :, None], sc], axis=-1).reshape(s.shape[0], -1)
    return out[0] if single else out


def _mlp_shapes(prefix, sizes):
    shapes = {}
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        shapes[f"{prefix}.W{i}"] = (a, b)
        shapes[f"{prefix}.b{i}"] = (b,)
    return shapes


def param_layout(cfg: NetConfig) -> dict:
    r2 = 2 * cfg.rank
    F = cfg.features
    shapes = {}
    shapes.update(_mlp_shapes("mode", (F, *cfg.mode_hidden, r2)))
    h = cfg.enc_hidden
    shapes["enc.Wy"] = (2, h[0])
    shapes["enc.Ws"] = (F, h[0])
    shapes["enc.b0"] = (h[0],)
    for i, (a, b) in enumerate(zip(h[:-1], h[1:]), start=1):
        shapes[f"enc.W{i}"] = (a, b)
        shapes[f"enc.b{i}"] = (b,)
    shapes["enc.mu.W"] = (h[-1], r2)
    shapes["enc.mu.b"] = (r2,)
    shapes["enc.lv.W"] = (h[-1], r2)
    shapes["enc.lv.b"] = (r2,)
    shapes.update(_mlp_shapes("drift", (r2 + 1, *cfg.drift_hidden, r2)))
    shapes["eig.alpha"] = (cfg.rank,)
    shapes["eig.beta"] = (cfg.rank,)
    shapes["noise.log_tau2"] = (1,)
    shapes["noise.log_sigma2"] = (1,)
    return shapes


def _glorot(rng, shape):
    lim = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-lim, lim, size=shape)


def init_params(cfg: NetConfig, seed: int = 0) -> ParamStore:
    """Fresh parameters: Glorot weights, zero biases, stable oscillatory eigenvalues."""
    store = ParamStore(param_layout(cfg))
    rng = de.keyed_rng(seed, 0, 1)
    for name in store.names:
        shape = store.shape(name)
        if ".W" in name or name.endswith(".Wy") or name.endswith(".Ws"):
            store[name] = _glorot(rng, shape)
    n_drift = len(cfg.drift_hidden)
    if cfg.zero_drift_output:
        store[f"drift.W{n_drift}"] = 0.0
    store["enc.lv.b"] = -4.0
    store["eig.alpha"] = rng.uniform(-0.1, 0.0, cfg.rank)
    store["eig.beta"] = rng.uniform(0.0, 5.0, cfg.rank)
    store["noise.log_tau2"] = cfg.init_log_tau2
    store["noise.log_sigma2"] = cfg.init_log_sigma2
    return store


def _mlp(P, prefix, x, n_layers):
    for i in range(n_layers):
        x = x @ P[f"{prefix}.W{i}"] + P[f"{prefix}.b{i}"]
        if i < n_layers - 1:
            x = de.tanh(x)
    return x


# -- mode extractor ------------------------------------------------------------

def mode_net(P, feats, cfg: NetConfig):
    """Mode values at encoded coordinates, shape (m, 2r) in the real lift."""
    return _mlp(P, "mode", de.as_tensor(feats), len(cfg.mode_hidden) + 1)


def lift_rows(O):
    """Real-lift row pairs of the mode matrix.

    ``O[i] = (Re W_i0, Im W_i0, ...)``; returns ``(a, b)`` with
    ``Re(W_i . phi) = a_i . phi_R`` and ``Im(W_i . phi) = b_i . phi_R``.
    """
    r2 = O.shape[-1]
    sign = np.tile([1.0, -1.0], r2 // 2)
    swap = np.zeros((r2, r2))
    idx = np.arange(0, r2, 2)
    swap[idx + 1, idx] = 1.0
    swap[idx, idx + 1] = 1.0
    return O * sign, O @ swap


def eval_modes(params: ParamStore, coords, cfg: NetConfig) -> np.ndarray:
    """Complex mode matrix (m, r) at arbitrary coordinates."""
    feats = positional_encode(np.asarray(coords, dtype=float), cfg.L)
    O = mode_net(params.leaves() if isinstance(params, ParamStore) else params, feats, cfg).value
    return O[:, 0::2] + 1j * O[:, 1::2]


# -- latent encoder --------------------------------------------------------------

def encoder(P, y_lift, feats, cfg: NetConfig):
    """Permutation-invariant encoder over a sensor set.

    ``y_lift``: (B, m, 2) real/imag values; ``feats``: (m, F) encoded
    coordinates. Returns ``(mu, logvar)``, each (B, 2r). Per-sensor
    features are mean-pooled, so sensor order cannot matter.
    """
    if y_lift.shape[-2] == 0:
        raise ValueError("encoder needs at least one sensor")
    # canonical sensor order makes the pooled sum bit-identical under permutation
    y_lift = de.as_tensor(y_lift)
    feats = np.asarray(feats, dtype=float)
    yv = np.moveaxis(y_lift.value, -2, 0).reshape(feats.shape[0], -1)
    order = np.lexsort(np.concatenate([feats, yv], axis=1).T[::-1])
    if np.any(order != np.arange(len(order))):
        y_lift = de.getitem(y_lift, (..., order, slice(None)))
        feats = feats[order]
    pre =de.as_tensor(y_lift) @ P["enc.Wy"] + (de.as_tensor(feats) @ P["enc.Ws"] + P["enc.b0"])
    h = de.tanh(pre)
    for i in range(1, len(cfg.enc_hidden)):
        h = de.tanh(h @ P[f"enc.W{i}"] + P[f"enc.b{i}"])
    pooled = h.mean(axis=-2)
    mu = pooled @ P["enc.mu.W"] + P["enc.mu.b"]
    lo, hi = cfg.logvar_bounds
    logvar = de.clip(pooled @ P["enc.lv.W"] + P["enc.lv.b"], lo, hi)
    return mu, logvar


def encode_latent(params: ParamStore, values, coords, cfg: NetConfig):
    """Encoder output for one complex field: ``(mu, var)`` complex/real-lift numpy arrays."""
    values = np.asarray(values, dtype=complex)
    if values.size == 0:
        raise ValueError("empty sensor set")
    y = np.stack([values.real, values.imag], axis=-1)[None]
    feats = positional_encode(np.asarray(coords, dtype=float), cfg.L)
    P = params.leaves() if isinstance(params, ParamStore) else params
    mu, lv = encoder(P, y, feats, cfg)
    return mu.value[0], np.exp(lv.value[0])


# -- drift -------------------------------------------------------------------------

_BASIS_CACHE: dict = {}


def _lift_basis(r):
    if r not in _BASIS_CACHE:
        A = np.zeros((r, 2 * r, 2 * r))
        Bm = np.zeros((r, 2 * r, 2 * r))
        for i in range(r):
            A[i, 2 * i, 2 * i] = A[i, 2 * i + 1, 2 * i + 1] = 1.0
            Bm[i, 2 * i, 2 * i + 1] = -1.0
            Bm[i, 2 * i + 1, 2 * i] = 1.0
        _BASIS_CACHE[r] = (A.reshape(r, -1), Bm.reshape(r, -1))
    return _BASIS_CACHE[r]


def eigen_lift(P, r):
    """Real lift of ``diag(alpha + j beta)``: 2x2 blocks ``[[a, -b], [b, a]]``."""
    A, Bm = _lift_basis(r)
    alpha = de.reshape(P["eig.alpha"], (1, r))
    beta = de.reshape(P["eig.beta"], (1, r))
    return de.reshape(alpha @ A + beta @ Bm, (2 * r, 2 * r))


def drift_and_jacobian(P, mu, t, cfg: NetConfig, jacobian=True):
    """Total drift ``Lambda phi + f(phi, t)`` and its real-lift Jacobian.

    ``mu``: (B, 2r); ``t``: (B,). Returns ``(drift (B, 2r), J (B, 2r, 2r))``
    with ``J[b, i, j] = d drift_i / d phi_j``; the Jacobian is assembled
    analytically from the layer activations, so it is itself differentiable.
    """
    r = cfg.rank
    lam = eigen_lift(P, r)
    mu = de.as_tensor(mu)
    tcol = de.as_tensor(np.asarray(t, dtype=float).reshape(-1, 1))
    x = de.concat([mu, tcol], axis=-1)
    n = len(cfg.drift_hidden)
    hs = []
    for i in range(n):
        x = de.tanh(x @ P[f"drift.W{i}"] + P[f"drift.b{i}"])
        hs.append(x)
    f = x @ P[f"drift.W{n}"] + P[f"drift.b{n}"]
    total = mu @ lam.T + f
    if not jacobian:
        return total, None
    # M = W0[:2r] diag(d1) W1 diag(d2) ... W_n, transposed at the end
    M = P["drift.W0"][: 2 * r]
    for i, h in enumerate(hs):
        d = 1.0 - h * h  # (B, H)
        M = M * de.reshape(d, (d.shape[0], 1, d.shape[1]))
        M = M @ P[f"drift.W{i + 1}"]
    J = lam + M.T
    return total, J


def drift(params, mu_c, t: float, cfg: NetConfig) -> np.ndarray:
    """``Lambda phi + f_theta(phi, t)`` for one complex latent vector."""
    mu_c = np.asarray(mu_c, dtype=complex)
    if mu_c.shape != (cfg.rank,):
        raise ValueError(f"latent must have length {cfg.rank}")
    P = params.leaves() if isinstance(params, ParamStore) else params
    lift = np.stack([mu_c.real, mu_c.imag], axis=-1).reshape(1, -1)
    out, _ = drift_and_jacobian(P, lift, np.array([t]), cfg, jacobian=False)
    v = out.value[0]
    return v[0::2] + 1j * v[1::2]


def to_complex(v):
    v = np.asarray(v)
    return v[..., 0::2] + 1j * v[..., 1::2]


def to_lift(c):
    c = np.asarray(c, dtype=complex)
    return np.stack([c.real, c.imag], axis=-1).reshape(*c.shape[:-1], 2 * c.shape[-1])
