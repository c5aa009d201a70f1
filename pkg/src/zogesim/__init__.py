"""Gradient-echo (ZOGE) simulations of an interacting quasiperiodic spin chain."""

__version__ = "0.1.0"
