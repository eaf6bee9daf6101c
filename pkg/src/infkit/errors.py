"""Exception types raised across the package."""


class InfkitError(Exception):
    """Base class for all package errors."""


class ShapeError(InfkitError, ValueError):
    """Array dimensions do not line up."""


class DomainError(InfkitError, ValueError):
    """An argument lies outside its valid domain (bad label, bad ratio, ...)."""


class NumericError(InfkitError, ArithmeticError):
    """A non-finite value appeared during evaluation.

    Attributes
    ----------
    layer
        Name of the layer where the first non-finite value was seen.
    """

    def __init__(self, message: str, layer: str | None = None):
        super().__init__(message if layer is None else f"{message} (layer {layer})")
        self.layer = layer


class TrainingError(InfkitError, RuntimeError):
    """Training diverged."""

    def __init__(self, message: str, epoch: int):
        super().__init__(f"{message} at epoch {epoch}")
        self.epoch = epoch


class RefusedError(InfkitError, ValueError):
    """The request is valid but deliberately refused (size caps, unsupported kinds)."""


class SingularError(InfkitError, ArithmeticError):
    """A linear system is (numerically) singular."""

    def __init__(self, message: str, condition: float):
        super().__init__(f"{message}; condition estimate {condition:.3e}")
        self.condition = condition


class ConvergenceError(InfkitError, RuntimeError):
    """An iterative solver failed to converge after all permitted restarts.

    Attributes
    ----------
    history
        One list of residual norms per attempt.
    """

    def __init__(self, message: str, history: list[list[float]]):
        super().__init__(message)
        self.history = history


class ConfigError(InfkitError, ValueError):
    """A configuration file or checkpoint cannot be accepted."""
