"""Exception hierarchy.

Every error raised for bad input data derives from :class:`DataError`; the CLI
maps those to exit code 2.
"""


class IsowattError(Exception):
    pass


class DataError(IsowattError):
    pass


class ParseError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class AlignmentError(DataError):
    pass


class MissingPowerError(DataError):
    pass


class UnknownContainerError(DataError):
    pass


class ProducerAbsentError(DataError):
    pass


class EmptyTargetSetError(DataError):
    pass


class DegenerateMatrixError(DataError):
    pass


class LengthMismatchError(DataError):
    pass


class FeatureMismatchError(DataError):
    pass


class HyperParamError(DataError):
    pass


class SingularFitError(DataError):
    pass


class UnsupportedIncrementalError(DataError):
    pass


class StoreIOError(DataError):
    pass


class CorruptArchiveError(DataError):
    pass


class NoCandidateError(DataError):
    pass


class MissingProfileError(DataError):
    pass


class NoModelError(DataError):
    pass


class DegenerateRangeError(DataError):
    pass


class EmptyInputError(DataError):
    pass


class SpecError(DataError):
    pass
