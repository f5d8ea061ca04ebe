"""Exception types shared across the package."""


class BubblingError(ValueError):
    """Base class for all validation and numerical errors raised here."""


class DimensionError(BubblingError):
    """Dimension outside the supported range (n >= 3)."""


class DivergentIntegralError(BubblingError):
    """Integrand is not integrable for the requested exponents."""


class InadmissibleAlphaError(BubblingError):
    """Flatness exponent outside the admissibility window of the regime."""

    def __init__(self, message, window=None):
        super().__init__(message)
        self.window = window


class AmbiguousGeometryError(BubblingError):
    """Geometry flags are inconsistent (e.g. conformally flat with Weyl != 0)."""


class UnsupportedRegimeError(BubblingError):
    """The requested combination is not covered by any concentration law."""


class MissingInputError(BubblingError):
    """A required input (correction field, constant, ...) was not supplied."""


class NoCriticalPointError(BubblingError):
    """The reduced function has no positive critical point."""


class DegenerateSpecError(BubblingError):
    """The critical point is degenerate by construction (beta == gamma)."""


class NumericalDiagnostic(BubblingError):
    """A numerical routine failed its own convergence or sanity checks."""
