"""Numerical study of asymptotic stability of small bound states for 2D NLS with a potential."""

__version__ = "0.1.0"
