"""Lattice approximations, duality and time reversal for reflected Brownian
motion in the orthant."""

from .model import RbmSpec, skew_check, validate_assumption

__version__ = "0.1.0"

__all__ = ["RbmSpec", "skew_check", "validate_assumption", "__version__"]
