"""Exception types shared across the package."""


class GalmadError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(GalmadError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DegenerateMaskError(GalmadError, ValueError):
    """A softmax mask selects no elements."""


class GradientError(GalmadError, RuntimeError):
    """Invalid use of the backward pass (non-scalar loss, missing grad, double call)."""


class IngestionError(GalmadError, ValueError):
    """Dataset directory or file could not be ingested."""


class InsufficientDataError(GalmadError, ValueError):
    """Stream or corpus is too short for the requested operation."""


class DivergenceError(GalmadError, RuntimeError):
    """Training produced a non-finite loss."""


class ScenarioError(GalmadError, ValueError):
    """Invalid synthetic workload scenario (unknown fault type, overlap, etc.)."""


class LocalizationError(GalmadError, ValueError):
    """Attribution cannot be computed (no anomalous steps, empty background)."""
