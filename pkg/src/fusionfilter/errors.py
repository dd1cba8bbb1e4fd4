"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: configuration and usage problems exit 1,
data problems exit 2, anything else exits 3.
"""


class FusionFilterError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 3


class ConfigError(FusionFilterError, ValueError):
    """An invalid specification, configuration value or parameter mismatch."""

    exit_code = 1


class UsageError(FusionFilterError, ValueError):
    """A call that cannot be served as asked (empty grid, missing decisions)."""

    exit_code = 1


class ShapeError(FusionFilterError, ValueError):
    """Array or vector widths that do not line up."""

    exit_code = 1


class DataError(FusionFilterError):
    """Inputs that are internally inconsistent, e.g. misaligned frame ids."""

    exit_code = 2
