"""Exception types shared across the package."""


class StwoError(Exception):
    """Base class for all package errors."""


class DimensionError(StwoError, ValueError):
    """Operand shapes, dtypes, or extents are incompatible."""


class ContractError(StwoError, ValueError):
    """An operation was called outside its documented contract."""


class ConfigError(StwoError, ValueError):
    """A configuration value or combination is invalid."""


class FormatError(StwoError, ValueError):
    """A serialized artifact is malformed, truncated, or version-mismatched."""


class NumericError(StwoError, RuntimeError):
    """A numeric computation failed: non-finite values or non-convergence."""
