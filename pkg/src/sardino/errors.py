"""Exception types shared across the package.

Every error raised intentionally by sardino derives from :class:`SardinoError`,
so the CLI can turn any expected failure into a single machine-parsable line.
"""


class SardinoError(Exception):
    """Base class for all intentional sardino failures."""

    code = "error"


class DimensionError(SardinoError):
    """Shapes of operands or rasters are incompatible."""

    code = "dimension"


class ParameterError(SardinoError):
    """A numeric argument is out of its valid range."""

    code = "parameter"


class NumericError(SardinoError):
    """NaN or other non-finite values appeared where finite math is required."""

    code = "numeric"


class StateError(SardinoError):
    """Object is not in a state that allows the requested operation."""

    code = "state"


class VerificationError(SardinoError):
    """A verification harness could not trust its own measurement."""

    code = "verification"


class DataError(SardinoError):
    """Input data is missing, empty, or violates its format contract."""

    code = "data"


class ConfigError(SardinoError):
    """Configuration file or run configuration is invalid."""

    code = "config"
