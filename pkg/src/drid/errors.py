"""Exception types shared across the package."""


class DridError(Exception):
    """Base class for all package-specific errors."""


class InfeasibleModel(DridError):
    """Agent parameters violate their invariants or exclude the zero response."""


class NoConvergence(DridError):
    """Forward solver hit its iteration cap above the certified residual."""

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


class DimensionMismatch(DridError):
    """Vector/matrix arguments disagree in length or shape."""


class GhostDemandViolation(DridError):
    """Baseline demand does not clear the non-responsive floor by the required gap."""


class DegenerateSystem(DridError):
    """KKT total-derivative matrix is numerically singular even after regularization."""

    def __init__(self, message: str, indices=None):
        super().__init__(message)
        self.indices = list(indices) if indices is not None else []


class ActiveSetFlip(DridError):
    """Finite-difference probe changed the active set between the two evaluations."""


class ShapeMismatch(DridError):
    """Optimizer state and parameter/gradient shapes disagree."""


class InsufficientData(DridError):
    """Not enough samples to estimate the requested statistics."""


class NonFiniteGradient(DridError):
    """A training gradient contained NaN or Inf."""


class DegenerateRun(DridError):
    """Too many scenarios were skipped for the training run to be trusted."""


class SchemaError(DridError):
    """Dataset files do not conform to the scenario CSV schema or manifest."""


class InvalidSpec(DridError):
    """Generation spec fields are out of their allowed ranges."""
