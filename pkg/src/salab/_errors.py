"""Exception hierarchy shared by every module."""


class SALabError(Exception):
    """Base class for all library errors."""


class DomainError(SALabError, ValueError):
    """An argument lies outside the domain of the operation."""


class UnknownStateError(DomainError, KeyError):
    """A state (or control) index is not part of the model."""

    def __str__(self):
        return Exception.__str__(self)


class MultichainError(SALabError):
    """A finite chain has more than one recurrent class."""

    def __init__(self, message, classes=None, policy=None):
        super().__init__(message)
        self.classes = classes or []
        self.policy = policy


class NumericalError(SALabError, ArithmeticError):
    """A numerical routine failed to converge or hit a singular system."""


class BlowUpError(SALabError, ArithmeticError):
    """An integrated curve became non-finite."""

    def __init__(self, message, time=None, partial=None):
        super().__init__(message)
        self.time = time
        self.partial = partial


class EstimationFailed(SALabError):
    """No flow time satisfying the requested criterion exists within the horizon."""


class ConfigError(SALabError, ValueError):
    """A scenario or table is malformed or inconsistent."""
