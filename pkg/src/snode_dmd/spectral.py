"""FFT helpers for periodic 2-D fields on ``[0, L)^2``.

Arrays are indexed ``f[iy, ix]``; ``kx`` varies along axis 1.
"""

import numpy as np


def wavenumbers(n: int, L: float = 2 * np.pi):
    k = np.fft.fftfreq(n, d=L / n) * 2 * np.pi
    kx, ky = np.meshgrid(k, k)
    return kx, ky


def dealias_mask(n: int, L: float = 2 * np.pi):
    """2/3-rule truncation mask."""
    kx, ky = wavenumbers(n, L)
    kmax = np.abs(kx).max()
    return (np.abs(kx) < (2.0 / 3.0) * kmax) & (np.abs(ky) < (2.0 / 3.0) * kmax)


def streamfunction_hat(w_hat, kx, ky):
    """Solve ``lap psi = -omega`` in Fourier space; the mean mode is set to 0."""
    k2 = kx ** 2 + ky ** 2
    k2s = np.where(k2 == 0, 1.0, k2)
    psi = w_hat / k2s
    psi[k2 == 0] = 0.0
    return psi


def velocity_hat(w_hat, kx, ky):
    """``(u, v) = (d psi/dy, -d psi/dx)`` in Fourier space."""
    psi = streamfunction_hat(w_hat, kx, ky)
    return 1j * ky * psi, -1j * kx * psi


def curl(u, v, L=2 * np.pi):
    n = u.shape[0]
    kx, ky = wavenumbers(n, L)
    return np.real(np.fft.ifft2(1j * kx * np.fft.fft2(v) - 1j * ky * np.fft.fft2(u)))


def divergence(u, v, L=2 * np.pi):
    n = u.shape[0]
    kx, ky = wavenumbers(n, L)
    return np.real(np.fft.ifft2(1j * kx * np.fft.fft2(u) + 1j * ky * np.fft.fft2(v)))


def spectral_norm(f):
    """RMS norm computed from Fourier coefficients (Parseval)."""
    return float(np.sqrt(np.sum(np.abs(np.fft.fft2(f)) ** 2)) / f.size)
