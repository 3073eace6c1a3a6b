"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: config/contract/shape misuse -> 2,
data ingestion problems -> 3, numeric failures -> 4.
"""


class MonarchPcError(Exception):
    """Base class for all package errors."""


class ConfigError(MonarchPcError):
    """Bad run configuration, flags, or spec values."""


class ContractError(MonarchPcError):
    """An operation was called on an object violating its precondition."""


class DimensionError(MonarchPcError):
    """Mismatched tensor/block dimensions."""


class DataError(MonarchPcError):
    """Malformed or out-of-range input data."""


class NumericError(MonarchPcError):
    """Numeric failure (NaN, non-finite likelihood where finite required)."""
