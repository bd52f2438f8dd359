"""Exception hierarchy shared across the package."""


class SplitPrivError(Exception):
    """Base class for all package errors."""


class ShapeError(SplitPrivError, ValueError):
    """Inconsistent tensor shapes (graph construction, inputs, interfaces)."""


class NumericError(SplitPrivError, FloatingPointError):
    """A non-finite value appeared in an activation, loss or gradient."""


class CheckpointError(SplitPrivError, ValueError):
    """Malformed or truncated SPLK container."""


class DataFormatError(SplitPrivError, ValueError):
    """Malformed dataset files or unusable dataset contents."""


class CalibrationError(SplitPrivError, RuntimeError):
    """Noise calibration could not meet its target."""


class EstimationError(SplitPrivError, ValueError):
    """Mutual-information estimation on degenerate or too-small samples."""


class TrainingError(SplitPrivError, RuntimeError):
    """Training diverged; carries the partial epoch log."""

    def __init__(self, message, epoch_log=None):
        super().__init__(message)
        self.epoch_log = list(epoch_log or [])


class FrozenEdgeViolation(SplitPrivError, RuntimeError):
    """Edge parameters or noise bank changed during an attack."""


class ConfigError(SplitPrivError, ValueError):
    """Invalid experiment configuration."""
