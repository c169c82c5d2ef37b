"""Exception hierarchy shared by every subsystem."""


class AVNError(Exception):
    """Base class for all package errors."""


class DimensionError(AVNError, ValueError):
    pass


class StateError(AVNError, RuntimeError):
    pass


class NumericError(AVNError, ArithmeticError):
    pass


class GenerationError(AVNError):
    """World or episode generation could not satisfy its constraints."""


class GraphLookupError(AVNError, KeyError):
    pass


class NoPathError(AVNError):
    pass


class VocabularyError(AVNError, KeyError):
    pass


class UnsupportedLabelingError(AVNError):
    pass


class ContractViolation(AVNError):
    pass


class TransferError(AVNError):
    pass


class CalibrationError(AVNError):
    pass


class InputError(AVNError, ValueError):
    pass


class TrainingError(AVNError):
    """Raised when training diverges; carries the last finite checkpoint."""

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class ConfigError(AVNError):
    pass
