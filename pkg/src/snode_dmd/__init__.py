"""Stochastic NODE-DMD: probabilistic, grid-free dynamic mode decomposition.

Fields observed at sparse sensors are encoded into complex mode
coefficients that evolve under a linear spectrum plus a learned drift,
with Gaussian uncertainty carried through an Euler-Maruyama SDE.
"""

__version__ = "0.1.0"
