"""Exception hierarchy shared by all lidarcl modules.

Library code raises these; the CLI maps them to exit codes.
"""


class LidarclError(Exception):
    """Base class for all harness errors."""

    exit_code = 1


class ConfigError(LidarclError, ValueError):
    """Invalid configuration, spec or taxonomy."""

    exit_code = 2


class DataError(LidarclError, ValueError):
    """Missing, truncated or inconsistent dataset files."""

    exit_code = 3


class NumericalError(LidarclError, ArithmeticError):
    """Non-finite loss, input or parameter."""

    exit_code = 4


class TaxonomyError(ConfigError):
    """Taxonomy file or query violates an invariant."""

    def __init__(self, message: str, *, line: int | None = None, offender: str | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
        self.offender = offender


class InvalidClassError(TaxonomyError):
    """A ClassId or class name not known to the taxonomy."""


class UnsupportedQueryError(TaxonomyError):
    """A hierarchy query on a taxonomy without a hierarchy."""
