"""Exception types shared across pgmerge."""


class PgmergeError(Exception):
    """Base class for errors raised by pgmerge."""


class UsageError(PgmergeError, ValueError):
    """Bad arguments: dimension mismatch, invalid id, out-of-range parameter."""


class FormatError(PgmergeError, ValueError):
    """A file does not follow the expected binary or JSON layout."""
