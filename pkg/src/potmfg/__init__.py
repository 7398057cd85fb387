"""Potential finite-state mean field games on the probability simplex."""

from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
