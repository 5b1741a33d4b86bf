"""Chance-constrained covariance steering via consensus ADMM and successive convexification."""

__version__ = "0.1.0"
