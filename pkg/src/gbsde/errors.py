"""Exception hierarchy shared by all modules.

Each class carries the CLI exit code it maps to.
"""


class GbsdeError(Exception):
    exit_code = 1


class InputError(GbsdeError, ValueError):
    """Malformed arguments: wrong shapes, asymmetric data, unknown modes."""

    exit_code = 3


class DomainError(InputError):
    """Argument outside the mathematical domain of an operation."""


class ConfigError(GbsdeError):
    """A declared assumption or configuration precondition does not hold."""

    exit_code = 3


class PreconditionError(ConfigError):
    def __init__(self, message, witness=None):
        super().__init__(message)
        self.witness = witness


class ParseError(GbsdeError):
    exit_code = 2


class ResourceError(GbsdeError):
    exit_code = 4


class NumericError(GbsdeError, ArithmeticError):
    exit_code = 3
