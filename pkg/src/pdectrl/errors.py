"""Exception hierarchy shared by all modules."""


class PdeCtrlError(Exception):
    """Base class for every error raised by this package."""


class InvalidArgumentError(PdeCtrlError, ValueError):
    pass


class NumericalFailureError(PdeCtrlError, ArithmeticError):
    pass


class ConfigError(PdeCtrlError):
    pass


class EnvironmentFault(PdeCtrlError):
    """Raised when the simulated state stops being finite."""


class CheckpointFormatError(PdeCtrlError):
    pass


class DatasetFormatError(PdeCtrlError):
    pass


class NotReadyError(PdeCtrlError):
    """Raised when the replay buffer holds fewer transitions than requested."""
