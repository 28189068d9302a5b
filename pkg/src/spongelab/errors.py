"""Exception types shared across the package."""


class SpongeLabError(Exception):
    """Base class for all package errors."""


class ShapeError(SpongeLabError, ValueError):
    """Tensor or layer dimensions do not line up."""


class DomainError(SpongeLabError, ValueError):
    """A numeric argument is outside its valid domain."""


class ConfigError(SpongeLabError, ValueError):
    """Invalid or inconsistent experiment configuration."""


class DataError(SpongeLabError, RuntimeError):
    """Dataset files are missing, malformed, or inconsistent."""


class ModelIOError(SpongeLabError, RuntimeError):
    """Model file cannot be read or fails integrity checks."""


class GraphStateError(SpongeLabError, RuntimeError):
    """Autodiff graph misuse or a non-finite value produced by an op."""


class TrainingDiverged(SpongeLabError, RuntimeError):
    """Training produced a non-finite loss; carries partial metrics."""

    def __init__(self, message, metrics=None):
        super().__init__(message)
        self.metrics = metrics or []


class AttackAborted(SpongeLabError, RuntimeError):
    """Attack hit a non-finite evaluation; carries the partial trace."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace
