"""Exception types shared across the package."""


class ScriptIdError(Exception):
    """Base class for all package errors."""


class InvalidInputError(ScriptIdError):
    """An argument violates a documented precondition."""


class ShapeError(InvalidInputError):
    """Array shapes are inconsistent with the operation."""


class ConfigurationError(ScriptIdError):
    """A configuration value is unusable (e.g. batch of 1 in train-mode batch norm)."""


class NumericFaultError(ScriptIdError):
    """A non-finite value appeared in a computation.

    ``where`` names the tensor or layer that first went non-finite.
    """

    def __init__(self, where, message=""):
        self.where = where
        super().__init__(message or f"non-finite values in {where}")


class DataError(ScriptIdError):
    """A dataset, manifest, or image file is missing or malformed."""


class CheckpointError(ScriptIdError):
    """Base class for checkpoint serialization errors."""


class BadMagicError(CheckpointError):
    """File does not start with the checkpoint magic bytes."""


class UnsupportedVersionError(CheckpointError):
    """Checkpoint format version is newer than this code supports."""


class IntegrityError(CheckpointError):
    """Checkpoint file is truncated or internally inconsistent."""


class TensorMismatchError(CheckpointError):
    """A tensor is missing or its shape disagrees with the model architecture."""
