"""Specular billiard flow in a cylindrical annulus, flow-regularity checks and a mild Boltzmann solver."""

from .errors import AnnulusError
from .geometry import AnnulusDomain, Case, PhaseState

__version__ = "0.1.0"

__all__ = ["AnnulusDomain", "AnnulusError", "Case", "PhaseState", "__version__"]
