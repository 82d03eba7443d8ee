"""Exception hierarchy shared by every module in the package."""


class MirrorBridgeError(Exception):
    """Base class for all errors raised by this package."""


class InvalidArgumentError(MirrorBridgeError, ValueError):
    """An argument violates a documented precondition."""


class NumericError(MirrorBridgeError, FloatingPointError):
    """A non-finite value appeared where a finite one is required."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class SimulationBlowupError(MirrorBridgeError, RuntimeError):
    """A simulated trajectory left the overflow guard region.

    Carries the trajectory and step at which the guard tripped so the
    caller can report which sample path diverged.
    """

    def __init__(self, message, trajectory, step):
        super().__init__(message)
        self.trajectory = trajectory
        self.step = step


class SerializationError(MirrorBridgeError, IOError):
    """A file does not conform to one of the package's on-disk formats."""


class IntegrityError(SerializationError):
    """Stored content does not match its recorded content hash."""


class ConvergenceError(MirrorBridgeError, RuntimeError):
    """An iterative solver exhausted its iteration budget."""
