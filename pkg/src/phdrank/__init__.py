"""Personalized highlight ranking over precomputed segment features."""

__version__ = "0.1.0"
