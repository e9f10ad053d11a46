"""Exception hierarchy; each class carries the CLI exit code it maps to."""


class AetError(Exception):
    exit_code = 1


class ConfigError(AetError, ValueError):
    exit_code = 2


class ContractError(AetError, ValueError):
    exit_code = 2


class ShapeError(AetError, ValueError):
    exit_code = 2


class InputError(AetError, ValueError):
    exit_code = 3


class FormatError(AetError, ValueError):
    exit_code = 3


class DegeneracyError(AetError, ArithmeticError):
    exit_code = 4


class NumericalAbort(AetError, ArithmeticError):
    exit_code = 4

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record
