"""Numerical toolkit for degenerate Kolmogorov-Fokker-Planck operators with
time-dependent coefficients: geometry, Gaussian fundamental solution,
representation formulas, Hölder estimates and cross-checks."""

__version__ = "0.1.0"
