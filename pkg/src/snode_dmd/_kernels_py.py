"""Pure numpy versions of the hot kernels.

These are the reference semantics; the compiled module ``_kernels`` must
agree with them to rounding.
"""

import numpy as np


def sandwich(A, S):
    """Batched ``A @ S @ A^T`` for arrays of shape (B, n, n)."""
    return A @ S @ np.swapaxes(A, -1, -2)


def sandwich_grad(A, S, G):
    """Gradients of ``sum(G * A S A^T)`` with respect to ``A`` and ``S``."""
    At = np.swapaxes(A, -1, -2)
    Gt = np.swapaxes(G, -1, -2)
    gS = At @ G @ A
    gA = G @ A @ np.swapaxes(S, -1, -2) + Gt @ A @ S
    return gA, gS


def laplacian_periodic(f, dx):
    return (np.roll(f, 1, 0) + np.roll(f, -1, 0) + np.roll(f, 1, 1)
            + np.roll(f, -1, 1) - 4.0 * f) / (dx * dx)


def grayscott_steps(u, v, F, Du, Dv, k, dt, dx, nsteps):
    """Advance (u, v) by ``nsteps`` forward-Euler steps; returns new arrays."""
    u = np.array(u, dtype=float)
    v = np.array(v, dtype=float)
    for _ in range(int(nsteps)):
        uvv = u * v * v
        lu = laplacian_periodic(u, dx)
        lv = laplacian_periodic(v, dx)
        u, v = (u + dt * (Du * lu - uvv + F * (1.0 - u)),
                v + dt * (Dv * lv + uvv - (F + k) * v))
    return u, v


def _bilinear(f, x, y, h):
    n = f.shape[0]
    gx, gy = x / h, y / h
    fx, fy = np.floor(gx), np.floor(gy)
    tx, ty = gx - fx, gy - fy
    i0 = int(fx) % n
    j0 = int(fy) % n
    i1 = (i0 + 1) % n
    j1 = (j0 + 1) % n
    return ((1 - tx) * (1 - ty) * f[j0, i0] + tx * (1 - ty) * f[j0, i1]
            + (1 - tx) * ty * f[j1, i0] + tx * ty * f[j1, i1])


def _velocity(U, V, x, y, t, frame_dt, h):
    nf = U.shape[0]
    s = t / frame_dt
    if s <= 0:
        k0, w = 0, 0.0
    elif s >= nf - 1:
        k0, w = nf - 1, 0.0
    else:
        k0 = int(np.floor(s))
        w = s - k0
    u = _bilinear(U[k0], x, y, h)
    v = _bilinear(V[k0], x, y, h)
    if w > 0:
        u = (1 - w) * u + w * _bilinear(U[k0 + 1], x, y, h)
        v = (1 - w) * v + w * _bilinear(V[k0 + 1], x, y, h)
    return u, v


def advect_rk4(U, V, x0, y0, dt, steps, frame_dt, L):
    """RK4 particle path through time-indexed periodic velocity frames.

    ``U[k]``/``V[k]`` hold the velocity on an n x n grid (row = y index) at
    time ``k * frame_dt``; space is bilinear, time is piecewise linear, and
    positions wrap into ``[0, L)``.
    """
    n = U.shape[1]
    h = L / n
    x, y, t = x0 % L, y0 % L, 0.0
    traj = np.empty((steps + 1, 2))
    traj[0] = x, y
    for s in range(steps):
        k1 = _velocity(U, V, x, y, t, frame_dt, h)
        k2 = _velocity(U, V, (x + 0.5 * dt * k1[0]) % L, (y + 0.5 * dt * k1[1]) % L,
                       t + 0.5 * dt, frame_dt, h)
        k3 = _velocity(U, V, (x + 0.5 * dt * k2[0]) % L, (y + 0.5 * dt * k2[1]) % L,
                       t + 0.5 * dt, frame_dt, h)
        k4 = _velocity(U, V, (x + dt * k3[0]) % L, (y + dt * k3[1]) % L, t + dt,
                       frame_dt, h)
        x = (x + dt * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]) / 6.0) % L
        y = (y + dt * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1]) / 6.0) % L
        t += dt
        traj[s + 1] = x, y
    return traj
