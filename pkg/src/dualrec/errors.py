"""Exception types shared across the package.

Every error raised on purpose derives from DualrecError so callers (and the
command line driver) can distinguish our validation failures from genuine
bugs.  The CLI maps DualrecError subclasses to exit code 2 and
NumericError subclasses to exit code 3.
"""


class DualrecError(Exception):
    """Base class for all deliberate failures."""


class DimensionError(DualrecError):
    """Array rank or axis length does not match the operation's contract."""


class ParameterError(DualrecError):
    """A numeric argument is outside its admissible range."""


class DomainError(DualrecError):
    """Input values violate a mathematical domain requirement (e.g. log of a negative)."""


class ConfigError(DualrecError):
    """A configuration file or run specification is malformed."""


class StateError(DualrecError):
    """An object is used before it reached the required state."""


class ContainerError(DualrecError):
    """A binary container file is truncated, corrupt, or has a bad magic."""


class NumericError(DualrecError):
    """A computation produced NaN/Inf or otherwise diverged."""


class TrainAbortError(NumericError):
    """Training was stopped because the loss or gradients became non-finite.

    Carries enough context to write a diagnostics file.
    """

    def __init__(self, message, epoch=None, batch=None, diagnostics=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.diagnostics = diagnostics or {}
