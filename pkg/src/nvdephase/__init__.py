"""Dephasing budget and spin-bath toolkit for NV-center ensembles."""

from .constants import DEFAULT_CONSTANTS, PhysicalConstants

__all__ = ["DEFAULT_CONSTANTS", "PhysicalConstants"]
__version__ = "0.1.0"
