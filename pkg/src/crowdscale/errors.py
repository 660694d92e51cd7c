"""Exception taxonomy shared by all modules.

Exit-code mapping used by the CLI: UsageError -> 1, DataError and
FormatError -> 2, NumericalError -> 3.
"""


class CrowdscaleError(Exception):
    """Base class for all package errors."""


class DimensionError(CrowdscaleError):
    """Tensor/map dimensions are inconsistent with the operation."""


class ConfigurationError(CrowdscaleError):
    """A configuration value is invalid (bad kernel size, zero channels, ...)."""


class UsageError(CrowdscaleError):
    """The caller violated an API contract (backward on non-scalar, ...)."""


class FormatError(CrowdscaleError):
    """A file does not conform to its declared format."""


class DataError(CrowdscaleError):
    """Input data is malformed or missing."""


class GeometryError(CrowdscaleError):
    """A geometric construction is degenerate (no valid ground pixels, ...)."""


class NumericalError(CrowdscaleError):
    """A non-finite value appeared where finiteness is required."""
