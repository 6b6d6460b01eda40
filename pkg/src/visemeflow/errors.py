"""Exception taxonomy shared by all visemeflow modules.

The CLI maps these onto exit codes: ConfigError -> 3, DataError (and its
checkpoint subclasses) -> 4, TrainingDivergedError -> 5.
"""


class VisemeflowError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatchError(VisemeflowError):
    """Operands have incompatible shapes, ranks, dtypes or axes."""


class ConfigError(VisemeflowError):
    """Invalid run configuration (bad profile, incompatible architecture, ...)."""


class DataError(VisemeflowError):
    """Missing, corrupt or inconsistent data files."""


class CheckpointError(DataError):
    """Base class for checkpoint / tensor-file format errors."""


class BadMagicError(CheckpointError):
    """File does not start with the expected magic bytes."""


class TruncatedPayloadError(CheckpointError):
    """File ends before the declared payload is complete."""


class HeaderMismatchError(CheckpointError):
    """Checkpoint header disagrees with the tensor payload that follows it."""


class TrainingDivergedError(VisemeflowError):
    """A training loop produced a non-finite loss."""
