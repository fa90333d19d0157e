"""Convex integration toolkit for stochastic Euler: parameter ledger, spectral
calculus, Beltrami building blocks, OU noise, flow maps and the iteration step."""

__version__ = "0.1.0"
