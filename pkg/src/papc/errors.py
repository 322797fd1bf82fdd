"""Exception categories; the CLI maps each to its exit code."""


class PapcError(Exception):
    exit_code = 1


class ConfigError(PapcError, ValueError):
    exit_code = 2


class DataError(PapcError, ValueError):
    exit_code = 3


class NumericError(PapcError, ArithmeticError):
    exit_code = 4
