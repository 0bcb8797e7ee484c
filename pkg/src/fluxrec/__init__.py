"""Distributed-flux reconstruction on annular domains.

A small numerical library plus experiment CLI: a P1 finite-element
forward solver for an elliptic diffusion problem with Robin data on the
outer boundary and an unknown flux on the inner one, Tikhonov inversion
of the flux from outer-boundary traces, spectral fractional Sobolev
calculus on the inner loop, and desk-scale studies of the logarithmic
convergence rate and conditional-stability modulus.
"""

__version__ = "0.1.0"
