"""Exception types shared across the package.

Error categories map onto CLI exit codes: configuration and contract
violations exit 2, numeric failures exit 3.
"""


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class ConfigurationError(ValueError):
    """A config value or adapter target is invalid for the model at hand."""


class StateError(RuntimeError):
    """An operation was issued in the wrong object state (e.g. double merge)."""


class VocabularyError(ValueError):
    """A token or token id is outside the model vocabulary."""


class CorruptionError(RuntimeError):
    """On-disk data failed its checksum or structural validation."""


class NumericError(ArithmeticError):
    """A computation produced NaN/Inf from finite inputs (overflow)."""
