"""Exception hierarchy shared by all modules."""


class AmffError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(AmffError):
    """Tensor dimensions do not satisfy an operation's contract."""


class NumericError(AmffError):
    """A computation produced or received non-finite / degenerate values."""


class FormatError(AmffError):
    """A serialized artifact (feature records, checkpoint) is malformed."""


class DataError(AmffError):
    """A dataset or split request violates its preconditions."""


class ConfigError(AmffError):
    """Invalid configuration value or incompatible configuration pair."""
