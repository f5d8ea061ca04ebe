"""Constructive numerics for bubbling solutions of a critical scalar-curvature equation."""
from ._kernels import BACKEND
from .bubble_core import BubbleParams, CutoffSpec, CurvatureData, dim_constants
from .errors import (BubblingError, DegenerateSpecError, DimensionError, DivergentIntegralError,
                     InadmissibleAlphaError, NoCriticalPointError, NumericalDiagnostic)
from .regimes import FlatnessProfile, GeometryData, classify_regime

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "BubbleParams", "CutoffSpec", "CurvatureData", "dim_constants",
    "BubblingError", "DegenerateSpecError", "DimensionError", "DivergentIntegralError",
    "InadmissibleAlphaError", "NoCriticalPointError", "NumericalDiagnostic",
    "FlatnessProfile", "GeometryData", "classify_regime",
]
