"""Kernel dispatch: compiled extension when importable, numpy otherwise.

Set ``SNODE_DMD_PURE=1`` to force the numpy path (used by the benchmark and
the equivalence tests).
"""

import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("SNODE_DMD_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


# above this much work per call, batched BLAS beats the compiled loop
_SANDWICH_WORK = 4096


def _small(A):
    return A.shape[0] * A.shape[-1] ** 3 <= _SANDWICH_WORK


def sandwich(A, S):
    m = _impl if _small(A) else _kernels_py
    return m.sandwich(_c(A), _c(S))


def sandwich_grad(A, S, G):
    m = _impl if _small(A) else _kernels_py
    return m.sandwich_grad(_c(A), _c(S), _c(G))


def grayscott_steps(u, v, F, Du, Dv, k, dt, dx, nsteps):
    F = np.array(np.broadcast_to(np.asarray(F, dtype=float), np.shape(u)), order="C")
    return _impl.grayscott_steps(_c(u), _c(v), _c(F), float(Du), float(Dv), float(k),
                                 float(dt), float(dx), int(nsteps))


def advect_rk4(U, V, x0, y0, dt, steps, frame_dt, L):
    return _impl.advect_rk4(_c(U), _c(V), float(x0), float(y0), float(dt), int(steps),
                            float(frame_dt), float(L))


laplacian_periodic = _kernels_py.laplacian_periodic
