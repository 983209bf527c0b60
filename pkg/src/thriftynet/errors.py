"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: configuration problems exit 2,
data/checkpoint problems exit 3, numerical failures exit 4.
"""


class ThriftyNetError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(ThriftyNetError):
    """Invalid shapes, hyperparameters, or incompatible settings."""


class DegenerateBatchError(ConfigurationError):
    """Batch statistics requested over a single element."""


class DataError(ThriftyNetError):
    """Malformed dataset files or out-of-range labels."""


class CheckpointError(ThriftyNetError):
    """Unreadable, truncated, or mismatched checkpoint files."""


class NumericalError(ThriftyNetError):
    """Non-finite values or failed numerical verification."""
