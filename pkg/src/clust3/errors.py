"""Exception types raised across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(ValueError):
    """An input violates a documented precondition."""


class LabelError(ValueError):
    """A class label lies outside ``[0, num_classes)``."""


class BatchSizeError(ValueError):
    """Batch too small for batch-statistics normalization."""


class StructureError(ValueError):
    """A snapshot or checkpoint does not match the model layout."""


class ProtocolError(RuntimeError):
    """An adaptation routine was called without its required setup."""


class SizeError(ValueError):
    """An enumeration would exceed its allowed outcome space."""


class ConfigError(ValueError):
    """Malformed or unknown configuration entry.

    ``line`` is the 1-based line in the source file when known.
    """

    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line

    def __str__(self):
        msg = super().__str__()
        if self.line is not None:
            return f"line {self.line}: {msg}"
        return msg


class TrainingDivergedError(RuntimeError):
    """The training loss became non-finite."""
