"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: configuration problems exit 2, data
problems exit 3, numeric divergence exits 4.
"""


class HmsegError(Exception):
    """Base class for all package errors."""


class ConfigError(HmsegError):
    """Invalid configuration: bad key, bad value, inconsistent sizes."""


class DimensionError(HmsegError):
    """Tensor shapes incompatible with the requested operation."""


class UsageError(HmsegError):
    """An operation was called in a way its contract forbids."""


class DataError(HmsegError):
    """Corrupt or inconsistent data on disk (bad magic, truncation, bad ids)."""


class DivergenceError(HmsegError):
    """Training produced a non-finite loss."""
