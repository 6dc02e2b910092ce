"""Exception hierarchy shared by the library and the CLI.

Each class maps to one CLI exit code so failures stay diagnosable from
scripts: validation problems exit 2, I/O problems exit 3, and numerical
failures (non-finite objectives and the like) exit 4.
"""


class BodyfitError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ValidationError(BodyfitError):
    """Invalid argument, configuration, or model specification."""

    exit_code = 2


class DegenerateInputError(ValidationError):
    """Input is structurally valid but numerically degenerate (e.g. rank-deficient)."""


class DataIOError(BodyfitError):
    """Missing, truncated, or malformed input/output file."""

    exit_code = 3


class EndOfDataError(DataIOError):
    """A finite data source (pose library file) was exhausted."""


class NumericalError(BodyfitError):
    """Non-finite values where finite ones are required."""

    exit_code = 4
