"""Exception hierarchy shared across the package."""


class DecentCEMError(Exception):
    """Base class for all errors raised by this package."""


class ParameterError(DecentCEMError, ValueError):
    """Distribution or network parameters are malformed (shape, finiteness)."""


class EmptyEliteError(DecentCEMError, ValueError):
    """An MLE fit was requested on zero elite samples."""


class NoValidSampleError(DecentCEMError, RuntimeError):
    """Every evaluated sample scored -inf, so nothing can be ranked."""


class ConfigError(DecentCEMError, ValueError):
    """A configuration value violates its documented constraint."""


class EnsembleError(DecentCEMError, RuntimeError):
    """Every instance of an ensemble failed."""


class ConvergenceError(DecentCEMError, RuntimeError):
    """An iterative solver hit its iteration cap before reaching tolerance."""

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class TrainingError(DecentCEMError, FloatingPointError):
    """Network training produced a non-finite loss."""
