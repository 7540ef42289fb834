"""Exception hierarchy shared by every module."""


class QPanelError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(QPanelError, ValueError):
    """Invalid or inconsistent configuration."""

    exit_code = 2


class DataError(QPanelError, ValueError):
    """Input data that cannot be parsed or violates the panel invariants."""

    exit_code = 3


class EmptyPanelError(DataError):
    """Every group was removed by filtering."""


class NumericalError(QPanelError, ArithmeticError):
    """A numerical routine failed (singular matrix, solver failure, ...)."""

    exit_code = 4


class IdentificationError(NumericalError):
    """The moment conditions do not identify the requested coefficients."""

    def __init__(self, message, singular_value=None):
        super().__init__(message)
        self.singular_value = singular_value
