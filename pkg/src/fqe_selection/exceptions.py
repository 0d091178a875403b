"""Custom exceptions for the fqe-selection package."""


class FqeSelectionError(Exception):
    """Base exception class for all fqe-selection errors."""


class InvalidArgumentError(FqeSelectionError, ValueError):
    """Exception raised when an operation receives an argument outside its domain."""


class InvalidHorizonError(InvalidArgumentError):
    """Exception raised when a horizon/discount combination is not usable."""


class ConvergenceError(FqeSelectionError):
    """Exception raised when an iterative oracle exceeds its iteration cap."""


class AssumptionViolationError(FqeSelectionError):
    """Exception raised when a policy visits a state-action pair the data distribution never covers."""

    def __init__(self, step: int, state: int, action: int) -> None:
        self.step = step
        self.state = state
        self.action = action
        super().__init__(
            f'occupancy at step {step} puts mass on (s={state}, a={action}) where the data distribution is zero'
        )


class SingularSystemError(FqeSelectionError):
    """Exception raised when regression normal equations cannot be solved."""


class KernelNotPsdError(FqeSelectionError):
    """Exception raised when a kernel quadratic form is materially negative."""


class ConfigurationError(FqeSelectionError):
    """Exception raised for invalid experiment configuration or manifests."""
