"""Hybrid privacy-preserving collaborative predictive blacklisting."""

__version__ = "0.1.0"
