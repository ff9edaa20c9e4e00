"""Controllable traffic generation with STL-guided conditional diffusion."""

__version__ = "0.1.0"
