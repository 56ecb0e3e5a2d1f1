"""Spurious-correlation-aware embedding regularization at desk scale."""

__version__ = "0.1.0"
