"""Exception hierarchy shared by every package.

The CLI maps each family to an exit code: configuration 1, input 2, numerical 3.
"""


class BohmError(Exception):
    """Base class for all simulator errors."""

    exit_code = 3


class ConfigurationError(BohmError):
    """Invalid configuration (non-periodic axis, uncapped potential, bad keys)."""

    exit_code = 1


class InputError(BohmError):
    """Invalid input data passed to an operation."""

    exit_code = 2


class OutOfDomainError(InputError):
    """A query point lies outside the grid extent or the valid domain."""


class PreconditionError(InputError):
    """An operation was called on data violating its precondition."""


class NumericalError(BohmError):
    """A numerical procedure failed to deliver a trustworthy result."""

    exit_code = 3


class StatisticsError(NumericalError):
    """Not enough data for a statistic."""
