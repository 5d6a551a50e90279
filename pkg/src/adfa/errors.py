"""Exception hierarchy shared by the library and the command-line front end."""


class AdfaError(Exception):
    """Base class; ``exit_code`` is what the CLI returns for this error class."""

    exit_code = 1


class ConfigError(AdfaError, ValueError):
    exit_code = 2


class IngestionError(AdfaError, OSError):
    exit_code = 3


class NumericError(AdfaError, ArithmeticError):
    exit_code = 4


class TrainingError(AdfaError, RuntimeError):
    exit_code = 5


class SinkhornConvergenceWarning(RuntimeWarning):
    pass
