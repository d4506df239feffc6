"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: usage problems exit 1, data problems
exit 2, numerical failures exit 3.
"""


class UcascadeError(Exception):
    exit_code = 1


class ConfigError(UcascadeError, ValueError):
    exit_code = 1


class DataError(UcascadeError, ValueError):
    exit_code = 2


class NumericalError(UcascadeError, ArithmeticError):
    exit_code = 3
