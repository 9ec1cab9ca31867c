"""Exception hierarchy; each class maps to a CLI exit code."""


class CqaError(Exception):
    exit_code = 1


class ConfigError(CqaError, ValueError):
    exit_code = 2


class DataError(CqaError, ValueError):
    exit_code = 3


class NumericalError(CqaError, ArithmeticError):
    exit_code = 4
