"""Exception taxonomy shared across the package.

The command line maps these onto process exit codes: UsageError -> 1,
DataError -> 2, NumericalError -> 3.  Library code raises them directly.
"""


class ChromatileError(Exception):
    """Base class for all package-specific failures."""


class UsageError(ChromatileError):
    """Invalid arguments, configuration values, or call contracts."""


class DataError(ChromatileError):
    """Missing, malformed, or corrupt on-disk inputs."""


class NumericalError(ChromatileError):
    """Non-finite values where finite ones are required (e.g. a NaN loss)."""
