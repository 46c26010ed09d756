"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NumericInputError(ValueError):
    """Input contains non-finite values or violates a numeric precondition."""


class LengthError(ValueError):
    """A sequence exceeds the configured maximum length."""


class ConfigError(ValueError):
    """Configuration is missing required entries or holds invalid values."""


class CorpusFormatError(ValueError):
    """A serialized corpus record could not be parsed."""

    def __init__(self, message, index=None):
        self.index = index
        prefix = f"record {index}: " if index is not None else ""
        super().__init__(prefix + message)


class TaskMismatchError(ValueError):
    """A mask plan was routed to the wrong pre-training objective."""


class CheckpointError(ValueError):
    """Checkpoint is missing, malformed, or incompatible with the run config."""
