"""Exception types raised across the package."""


class DQJLError(Exception):
    """Base class for all package errors."""


class TooManyVehiclesError(DQJLError, ValueError):
    pass


class InvalidActionError(DQJLError, ValueError):
    pass


class InvalidProbabilityError(DQJLError, ValueError):
    pass


class InfeasibleDensityError(DQJLError, ValueError):
    pass


class ShapeMismatchError(DQJLError, ValueError):
    pass


class CheckpointError(DQJLError):
    """Checkpoint file is unreadable, truncated, or holds non-finite values."""


class TrainingDivergedError(DQJLError, RuntimeError):
    pass


class ConfigError(DQJLError, ValueError):
    pass
