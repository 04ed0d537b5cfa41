"""Exception hierarchy shared by every lsunet subsystem.

The CLI maps these onto exit codes: anything deriving from
``ValidationFailure`` is a user/input problem (exit 1), everything else
raised from inside a run is a runtime failure (exit 2).
"""


class LsuNetError(Exception):
    """Base class for all errors raised by this package."""


class ValidationFailure(LsuNetError):
    """Marker base for errors caused by invalid user input or files."""


class ShapeError(ValidationFailure):
    """Operand shapes are incompatible with an operation's contract."""


class ConfigError(ValidationFailure):
    """A configuration value violates an invariant."""


class ContractError(LsuNetError):
    """An internal API precondition was violated by the caller."""


class GraphError(LsuNetError):
    """Illegal use of the autodiff tape (e.g. nested recording)."""


class OracleInvalidError(LsuNetError):
    """A verification oracle cannot be trusted (e.g. non-deterministic f)."""


class NonFiniteError(LsuNetError):
    """NaN/Inf encountered where finite values are required."""


class DataValidationError(ValidationFailure):
    """A dataset directory or sample failed validation."""


class FileFormatError(ValidationFailure):
    """Base for serialized-format errors; subclasses are distinct codes."""


class BadMagicError(FileFormatError):
    pass


class BadVersionError(FileFormatError):
    pass


class TruncatedFileError(FileFormatError):
    pass


class PayloadMismatchError(FileFormatError):
    pass


class ChecksumError(FileFormatError):
    pass


class MissingEntryError(FileFormatError):
    pass


class UnknownEntryError(FileFormatError):
    pass


class EntryShapeError(FileFormatError):
    pass
