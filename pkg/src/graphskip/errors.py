"""Exception types shared across the package."""


class GraphSkipError(Exception):
    """Base class for all package errors."""


class ShapeError(GraphSkipError):
    """Tensor extents incompatible with the requested operation."""


class ConfigError(GraphSkipError):
    """Invalid configuration value (bad kernel width, M out of range, ...)."""


class NumericError(GraphSkipError):
    """Non-finite value produced where finiteness is guaranteed."""


class DegenerateBatchError(GraphSkipError):
    """Batch statistics requested over fewer than two elements."""


class GraphError(GraphSkipError):
    """Patch-graph construction or use failed (N too small, empty row)."""


class ValidationError(GraphSkipError):
    """Input data violates a documented precondition (e.g. non-binary mask)."""


class EmptyMaskError(GraphSkipError):
    """Distance metric requested against an empty foreground set."""


class ManifestError(GraphSkipError):
    """Checkpoint or corpus manifest incompatible with the requested run."""
