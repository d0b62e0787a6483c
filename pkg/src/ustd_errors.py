"""
USTD Errors Module

Error taxonomy shared by every USTD module. Each error carries the process
exit code the command-line interface returns when it reaches the top level,
so callers deep inside a training loop only need to raise the right class.
"""


class UstdError(Exception):
    """Base class for all USTD errors."""

    exit_code = 1


class ConfigError(UstdError):
    """Invalid configuration, missing or mismatched checkpoints."""

    exit_code = 2


class DataFormatError(UstdError):
    """Malformed or inconsistent dataset files."""

    exit_code = 3


class InputError(UstdError, ValueError):
    """An operation argument violates its precondition."""

    exit_code = 3


class ShapeError(InputError):
    """A tensor does not have the shape an operation requires."""


class ContractError(ShapeError):
    """Two components disagree on a shape they must share."""


class NumericError(UstdError):
    """Non-finite values or diverging optimisation."""

    exit_code = 4
