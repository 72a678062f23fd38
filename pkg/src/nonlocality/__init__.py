"""Exact two-electron Schroedinger solver and TDQMC guide-wave ensembles in 1D."""

__version__ = "0.1.0"
