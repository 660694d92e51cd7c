"""Context-aware crowd density estimation with a self-contained
reverse-mode tensor engine.

Subpackages cover ground-truth density construction, perspective
geometry, the multi-scale context model and its ablation variants,
training/evaluation and a synthetic scene generator, all exposed through
the `crowdscale` command-line tool.
"""

__version__ = "1.0.0"

from .errors import (ConfigurationError, CrowdscaleError, DataError,
                     DimensionError, FormatError, GeometryError,
                     NumericalError, UsageError)

__all__ = [
    "__version__",
    "CrowdscaleError", "DimensionError", "ConfigurationError", "UsageError",
    "FormatError", "DataError", "GeometryError", "NumericalError",
]
