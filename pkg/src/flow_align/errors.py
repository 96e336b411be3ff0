"""Exception hierarchy shared across the package."""


class FlowAlignError(Exception):
    """Base class for all package errors."""


class ConfigurationError(FlowAlignError, ValueError):
    """Invalid network, sampler, or experiment configuration."""


class ContractError(FlowAlignError, ValueError):
    """Caller violated an operation's precondition (shapes, weights, ...)."""


class NumericInputError(FlowAlignError, ValueError):
    """Non-finite value passed where a finite one is required."""


class DomainError(FlowAlignError, ValueError):
    """Argument outside the domain where the operation is defined."""


class UndefinedKernelError(FlowAlignError, ValueError):
    """Transition density requested for a zero-noise (Dirac) step."""


class DivergenceError(FlowAlignError, ArithmeticError):
    """Training or sampling produced non-finite values.

    ``step`` carries the sampler step or optimizer iteration when known.
    """

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class DependencyError(FlowAlignError, FileNotFoundError):
    """A stage needs an upstream artifact that does not exist."""
