"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: usage problems exit 1, data
problems exit 2, numeric failures exit 3.
"""


class FedlocError(Exception):
    """Base class for all package errors."""


class UsageError(FedlocError):
    """Bad command line or incompatible options."""


class SchemaError(FedlocError):
    """Input file is missing mandatory columns or has the wrong layout."""


class ParseError(FedlocError):
    """A data row could not be parsed; message carries the row number."""


class DataError(FedlocError):
    """Degenerate dataset (e.g. preprocessing eliminated every AP)."""


class ConfigError(FedlocError):
    """A configuration value violates its contract."""


class PartitionError(FedlocError):
    """Client partitioning is impossible under the requested strategy."""


class NumericError(FedlocError):
    """Training diverged or a linear system could not be solved."""
