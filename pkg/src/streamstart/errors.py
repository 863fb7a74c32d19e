"""Exception hierarchy shared across the package.

The CLI maps these onto stable exit codes: schema/row problems -> 2,
id mismatches -> 3, numeric failures -> 4, configuration errors -> 5.
"""

from __future__ import annotations


class StreamstartError(Exception):
    """Base class for all package errors."""


class SchemaError(StreamstartError):
    """A required column or field is missing or malformed."""


class RowError(StreamstartError):
    """A CSV data row failed parsing or validation.

    Carries the 1-based data row number (header excluded) for diagnostics.
    """

    def __init__(self, row: int, message: str):
        super().__init__(f"row {row}: {message}")
        self.row = row


class IdMismatchError(StreamstartError):
    """Annotations and score series could not be joined by id."""

    def __init__(self, missing: list[tuple[str, str]]):
        pairs = ", ".join(f"({v}, {q})" for v, q in missing)
        super().__init__(f"no score series for {len(missing)} annotation(s): {pairs}")
        self.missing = missing


class NumericError(StreamstartError):
    """A numeric contract was violated (non-finite value, divergence, gate range)."""


class ConfigError(StreamstartError):
    """An operation was requested with an inconsistent configuration."""
