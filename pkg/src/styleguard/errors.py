"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericError -> 4.
"""


class StyleGuardError(Exception):
    """Base class for all package errors."""


class ConfigError(StyleGuardError, ValueError):
    """Invalid configuration value or inconsistent option combination."""


class ContractError(StyleGuardError, ValueError):
    """A caller violated an API precondition (shapes, pairing, counts)."""


class DataError(StyleGuardError):
    """Unreadable, missing or malformed input data."""


class NumericError(StyleGuardError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class VocabularyError(StyleGuardError, KeyError):
    """Prompt token id outside a model's conditioning vocabulary."""
