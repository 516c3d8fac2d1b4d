"""Robust contraction metrics with tube-certified neural tracking controllers."""

__version__ = "0.1.0"
