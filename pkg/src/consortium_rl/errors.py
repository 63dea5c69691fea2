"""Exception types shared across the package."""


class ConsortiumError(Exception):
    """Base class for all package errors."""


class InvalidInputError(ConsortiumError, ValueError):
    """An argument is non-finite, out of range, or has the wrong shape."""


class ConfigurationError(ConsortiumError, ValueError):
    """A configuration file or object is inconsistent."""


class IntegrationError(ConsortiumError, ArithmeticError):
    """The ODE integrator produced a non-finite value."""

    def __init__(self, message, step=None, context=None):
        super().__init__(message)
        self.step = step
        self.context = dict(context or {})


class GradientError(ConsortiumError, ArithmeticError):
    """Back-propagation produced a non-finite value."""


class TrainingDivergedError(ConsortiumError, ArithmeticError):
    """A training epoch produced a non-finite return or gradient."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})
