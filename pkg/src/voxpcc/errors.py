"""Error taxonomy shared across the package.

The CLI maps these onto process exit codes: usage 1, data 2, internal 3.
"""


class UsageError(Exception):
    """Bad command-line arguments or option combinations."""


class DataError(Exception):
    """Malformed or inconsistent input data (files, streams, headers)."""


class InternalError(Exception):
    """A library invariant was violated; indicates a bug, not bad input."""
