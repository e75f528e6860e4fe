"""Simulation-based inference for noisy nonlinear dynamic models.

Synthetic likelihood, particle-filter likelihood, Metropolis-Hastings and
SMC-ABC samplers, with the vole-weasel, Ricker and linear-Gaussian models.
"""

__version__ = "0.1.0"
