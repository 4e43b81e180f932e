# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops.

Same signatures and results as :mod:`snode_dmd._kernels_py`; see there for
the contracts.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor, fmod

cnp.import_array()


cdef inline void _mm(const double* X, const double* Y, double* Z, Py_ssize_t n,
                     bint xt, bint yt) noexcept nogil:
    # Z = op(X) op(Y) for n x n row-major blocks, op = transpose when flagged;
    # i-k-j order keeps the inner loop contiguous in Y and Z when Y is untransposed
    cdef Py_ssize_t i, j, k
    cdef double x
    for i in range(n * n):
        Z[i] = 0.0
    for i in range(n):
        for k in range(n):
            x = X[k * n + i] if xt else X[i * n + k]
            if yt:
                for j in range(n):
                    Z[i * n + j] += x * Y[j * n + k]
            else:
                for j in range(n):
                    Z[i * n + j] += x * Y[k * n + j]


def sandwich(double[:, :, ::1] A, double[:, :, ::1] S):
    cdef Py_ssize_t B = A.shape[0], n = A.shape[1]
    cdef Py_ssize_t b
    out_arr = np.empty((B, n, n))
    tmp_arr = np.empty((n, n))
    cdef double[:, :, ::1] out = out_arr
    cdef double[:, ::1] tmp = tmp_arr
    if B == 0 or n == 0:
        return out_arr
    with nogil:
        for b in range(B):
            _mm(&A[b, 0, 0], &S[b, 0, 0], &tmp[0, 0], n, False, False)    # A S
            _mm(&tmp[0, 0], &A[b, 0, 0], &out[b, 0, 0], n, False, True)   # (A S) A^T
    return out_arr


def sandwich_grad(double[:, :, ::1] A, double[:, :, ::1] S, double[:, :, ::1] G):
    cdef Py_ssize_t B = A.shape[0], n = A.shape[1]
    cdef Py_ssize_t b, i
    gA_arr = np.empty((B, n, n))
    gS_arr = np.empty((B, n, n))
    t1_arr = np.empty((n, n))
    t2_arr = np.empty((n, n))
    cdef double[:, :, ::1] gA = gA_arr
    cdef double[:, :, ::1] gS = gS_arr
    cdef double[:, ::1] t1 = t1_arr
    cdef double[:, ::1] t2 = t2_arr
    if B == 0 or n == 0:
        return gA_arr, gS_arr
    with nogil:
        for b in range(B):
            _mm(&G[b, 0, 0], &A[b, 0, 0], &t1[0, 0], n, False, False)     # G A
            _mm(&A[b, 0, 0], &t1[0, 0], &gS[b, 0, 0], n, True, False)     # A^T G A
            _mm(&t1[0, 0], &S[b, 0, 0], &gA[b, 0, 0], n, False, True)     # G A S^T
            _mm(&G[b, 0, 0], &A[b, 0, 0], &t1[0, 0], n, True, False)      # G^T A
            _mm(&t1[0, 0], &S[b, 0, 0], &t2[0, 0], n, False, False)       # G^T A S
            for i in range(n * n):
                (&gA[b, 0, 0])[i] += (&t2[0, 0])[i]
    return gA_arr, gS_arr


def grayscott_steps(double[:, ::1] u, double[:, ::1] v, double[:, ::1] F,
                    double Du, double Dv, double k, double dt, double dx,
                    Py_ssize_t nsteps):
    cdef Py_ssize_t ny = u.shape[0], nx = u.shape[1]
    cdef Py_ssize_t s, i, j, ip, im, jp, jm
    cdef double inv = 1.0 / (dx * dx)
    cdef double lu, lv, uu, vv, uvv
    un_arr = np.empty((ny, nx))
    vn_arr = np.empty((ny, nx))
    cdef double[:, ::1] un = un_arr
    cdef double[:, ::1] vn = vn_arr
    cdef double[:, ::1] tu
    cdef double[:, ::1] tv
    for s in range(nsteps):
        for i in range(ny):
            ip = i + 1 if i + 1 < ny else 0
            im = i - 1 if i > 0 else ny - 1
            for j in range(nx):
                jp = j + 1 if j + 1 < nx else 0
                jm = j - 1 if j > 0 else nx - 1
                uu = u[i, j]
                vv = v[i, j]
                lu = (u[ip, j] + u[im, j] + u[i, jp] + u[i, jm] - 4.0 * uu) * inv
                lv = (v[ip, j] + v[im, j] + v[i, jp] + v[i, jm] - 4.0 * vv) * inv
                uvv = uu * vv * vv
                un[i, j] = uu + dt * (Du * lu - uvv + F[i, j] * (1.0 - uu))
                vn[i, j] = vv + dt * (Dv * lv + uvv - (F[i, j] + k) * vv)
        tu = u
        tv = v
        u = un
        v = vn
        un = tu
        vn = tv
    return np.asarray(u).copy(), np.asarray(v).copy()


cdef inline double _wrap(double x, double L) nogil:
    x = fmod(x, L)
    if x < 0:
        x = x + L
    return x


cdef double _bilinear(double[:, ::1] f, double x, double y, double h) nogil:
    cdef Py_ssize_t n = f.shape[0]
    cdef double gx = x / h, gy = y / h
    cdef double fx = floor(gx), fy = floor(gy)
    cdef double tx = gx - fx, ty = gy - fy
    cdef Py_ssize_t i0 = (<Py_ssize_t> fx) % n
    cdef Py_ssize_t j0 = (<Py_ssize_t> fy) % n
    cdef Py_ssize_t i1 = (i0 + 1) % n
    cdef Py_ssize_t j1 = (j0 + 1) % n
    if i0 < 0:
        i0 = i0 + n
    if j0 < 0:
        j0 = j0 + n
    # f[row=y index, col=x index]
    return ((1 - tx) * (1 - ty) * f[j0, i0] + tx * (1 - ty) * f[j0, i1]
            + (1 - tx) * ty * f[j1, i0] + tx * ty * f[j1, i1])


cdef void _velocity(double[:, :, ::1] U, double[:, :, ::1] V, double x, double y,
                    double t, double frame_dt, double h, double* ou, double* ov) nogil:
    cdef Py_ssize_t nf = U.shape[0]
    cdef double s = t / frame_dt
    cdef Py_ssize_t k0
    cdef double w
    if s <= 0:
        k0 = 0
        w = 0.0
    elif s >= nf - 1:
        k0 = nf - 1
        w = 0.0
    else:
        k0 = <Py_ssize_t> floor(s)
        w = s - k0
    ou[0] = _bilinear(U[k0], x, y, h)
    ov[0] = _bilinear(V[k0], x, y, h)
    if w > 0:
        ou[0] = (1 - w) * ou[0] + w * _bilinear(U[k0 + 1], x, y, h)
        ov[0] = (1 - w) * ov[0] + w * _bilinear(V[k0 + 1], x, y, h)


def advect_rk4(double[:, :, ::1] U, double[:, :, ::1] V, double x0, double y0,
               double dt, Py_ssize_t steps, double frame_dt, double L):
    cdef Py_ssize_t n = U.shape[1]
    cdef double h = L / n
    cdef double x = _wrap(x0, L), y = _wrap(y0, L), t = 0.0
    cdef double k1u, k1v, k2u, k2v, k3u, k3v, k4u, k4v
    cdef Py_ssize_t s
    traj_arr = np.empty((steps + 1, 2))
    cdef double[:, ::1] traj = traj_arr
    traj[0, 0] = x
    traj[0, 1] = y
    for s in range(steps):
        _velocity(U, V, x, y, t, frame_dt, h, &k1u, &k1v)
        _velocity(U, V, _wrap(x + 0.5 * dt * k1u, L), _wrap(y + 0.5 * dt * k1v, L),
                  t + 0.5 * dt, frame_dt, h, &k2u, &k2v)
        _velocity(U, V, _wrap(x + 0.5 * dt * k2u, L), _wrap(y + 0.5 * dt * k2v, L),
                  t + 0.5 * dt, frame_dt, h, &k3u, &k3v)
        _velocity(U, V, _wrap(x + dt * k3u, L), _wrap(y + dt * k3v, L),
                  t + dt, frame_dt, h, &k4u, &k4v)
        x = _wrap(x + dt * (k1u + 2 * k2u + 2 * k3u + k4u) / 6.0, L)
        y = _wrap(y + dt * (k1v + 2 * k2v + 2 * k3v + k4v) / 6.0, L)
        t = t + dt
        traj[s + 1, 0] = x
        traj[s + 1, 1] = y
    return traj_arr
