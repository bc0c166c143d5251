# /modules/tcd_forecast/errors.py
# Every error carries the exit code the CLI reports and, when known, the
# offending config path or file.


class TCDError(Exception):
    exit_code = 1

    def __init__(self, message, path=None):
        super().__init__(message)
        self.message = message
        self.path = path

    def to_record(self):
        """Machine-readable form used by the CLI error line."""
        return {
            "code": self.exit_code,
            "type": type(self).__name__,
            "message": self.message,
            "path": str(self.path) if self.path is not None else None,
        }


# --- PARAMETERS & SHAPES ---
class ParameterError(TCDError, ValueError):
    exit_code = 2


class DegenerateBatchError(ParameterError):
    pass


class StructuralError(TCDError, ValueError):
    exit_code = 3


# --- NUMERICS & SAMPLER STATE ---
class NumericalDomainError(TCDError, ArithmeticError):
    exit_code = 4


class StateError(TCDError, RuntimeError):
    exit_code = 5


class ModeError(TCDError):
    exit_code = 6


class TrainingDivergedError(TCDError, RuntimeError):
    exit_code = 7


# --- FILES ---
class SequenceIOError(TCDError, IOError):
    exit_code = 8


class UnrecognizedFormatError(SequenceIOError):
    pass


class TruncatedPayloadError(SequenceIOError):
    pass


class HeaderMismatchError(SequenceIOError):
    pass


class CheckpointError(TCDError, IOError):
    exit_code = 9


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


# --- CONFIG & EXTERNAL PREDICTORS ---
class ConfigError(TCDError, ValueError):
    exit_code = 10


class PredictorError(TCDError, RuntimeError):
    exit_code = 11
