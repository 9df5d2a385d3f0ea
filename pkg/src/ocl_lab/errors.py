"""Exception types shared across the package."""


class OclLabError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(OclLabError):
    """Array shapes do not compose or do not match a declared dimension."""


class EmptyBatchError(OclLabError):
    """An operation that needs at least one sample received none."""


class InvalidLabelError(OclLabError):
    """A label falls outside the class set it must belong to."""


class StateError(OclLabError):
    """An operation was called in a state that does not support it."""


class NumericError(OclLabError):
    """A non-finite value appeared where finite arithmetic is required."""


class FormatError(OclLabError):
    """A data file does not match its declared on-disk format."""


class ConfigError(OclLabError):
    """A configuration value is missing, unknown, or out of range."""


class NoBlankSubspaceError(OclLabError):
    """No untouched feature slice remains; reuse selection is required."""


class UndefinedMetricError(OclLabError):
    """The requested metric is undefined for the given matrix shape."""
