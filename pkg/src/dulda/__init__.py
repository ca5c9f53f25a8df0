"""Dual-domain unsupervised learned descent for PET reconstruction."""

__version__ = "0.1.0"
