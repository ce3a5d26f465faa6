"""Exception hierarchy shared by every module; the CLI maps these to exit codes."""

from config import get_error_message


class HM3Error(Exception):
    """Base class for toolkit errors."""

    def __init__(self, key: str, **kwargs):
        self.key = key
        self.details = kwargs
        super().__init__(get_error_message(key, **kwargs))


class StructuralError(HM3Error, ValueError):
    """Shapes, labels or layouts that do not fit together."""


class InvariantError(HM3Error, ValueError):
    """A value violates one of its documented invariants."""


class CheckpointFormatError(HM3Error):
    """A checkpoint file could not be decoded."""


class MalformedHeaderError(CheckpointFormatError):
    pass


class TruncatedPayloadError(CheckpointFormatError):
    pass


class UnknownFamilyError(CheckpointFormatError):
    pass


class ManifestMismatchError(CheckpointFormatError):
    pass


class OverlappingExtentsError(CheckpointFormatError):
    pass


class RecipeError(HM3Error, ValueError):
    """Invalid merge recipe or search config."""


class DatasetError(HM3Error, ValueError):
    """Dataset or cross-check plan problems."""


class EvaluationError(HM3Error):
    """Prediction failed while evaluating a dataset."""


class ExternalEvaluatorError(HM3Error):
    """The external evaluator failed or returned garbage."""


class ArgumentError(HM3Error):
    """Command-line arguments are missing or inconsistent."""


# Errors caused by bad inputs rather than by a failing run
VALIDATION_ERRORS = (StructuralError, InvariantError, CheckpointFormatError, RecipeError, DatasetError)
