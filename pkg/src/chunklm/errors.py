"""Exception types the CLI maps to exit codes: data problems exit 2,
numeric failures exit 3."""


class DataError(Exception):
    """Malformed corpus, config, gold, or checkpoint content."""


class NumericError(Exception):
    """Numeric failure: NaN loss, non-finite gradient, failed check."""
