"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1 (usage),
DataError -> 2, NumericError -> 3.
"""


class ComvtError(Exception):
    """Base class for all package errors."""


class ContractError(ComvtError):
    """A precondition or shape contract was violated by the caller."""


class EmptyKeySetError(ContractError):
    """Attention was asked to attend over zero (or fully masked) keys."""


class NumericError(ComvtError):
    """Non-finite values or a failed numeric check."""


class DataError(ComvtError):
    """Malformed input files or insufficient data."""


class ConfigError(ComvtError):
    """Invalid run configuration."""
