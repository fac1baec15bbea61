"""Graph-attentive skip connections for a small encoder-decoder segmenter."""

__version__ = "0.1.0"

from .errors import (ConfigError, DegenerateBatchError, EmptyMaskError,
                     GraphError, GraphSkipError, ManifestError, NumericError,
                     ShapeError, ValidationError)
from .tensor import Parameter, Tensor, no_grad, set_default_dtype

__all__ = [
    "ConfigError", "DegenerateBatchError", "EmptyMaskError", "GraphError",
    "GraphSkipError", "ManifestError", "NumericError", "ShapeError",
    "ValidationError", "Parameter", "Tensor", "no_grad", "set_default_dtype",
    "__version__",
]
