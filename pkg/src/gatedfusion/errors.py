"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class DegenerateMaskError(ValueError):
    """A softmax row has no unmasked entries to normalize over."""


class ParseError(ValueError):
    """A dataset file could not be parsed; message carries the line number."""


class SchemaError(ValueError):
    """A dataset record violates the schema; message names the video id."""


class ConfigError(ValueError):
    """A run configuration document is invalid; message names the field."""


class CheckpointError(ValueError):
    """A checkpoint file is unreadable, corrupt, or of the wrong version."""


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss); carries epoch and batch index."""

    def __init__(self, message: str, epoch: int, batch: int):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
