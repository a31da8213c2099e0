"""Exception types shared across the package."""


class PcgError(Exception):
    """Base class for errors raised by this package."""


class DataError(PcgError):
    """Unusable input data: malformed files, missing labels, impossible corpora."""


class ConfigError(PcgError):
    """Invalid configuration or command-line usage."""


class ShapeError(PcgError):
    """Tensor shape does not match what a layer or format expects."""


class TrainingDiverged(PcgError):
    """Raised when a training step produces a non-finite loss.

    Carries the offending state so a caller can inspect it.
    """

    def __init__(self, message, weights=None, opt_state=None):
        super().__init__(message)
        self.weights = weights
        self.opt_state = opt_state
