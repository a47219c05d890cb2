"""Exception types shared across the package."""


class OGFRError(Exception):
    """Base class for all package errors."""


class ShapeError(OGFRError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(OGFRError, ValueError):
    """A caller violated an operation precondition."""


class ConfigError(OGFRError, ValueError):
    """Invalid configuration or degenerate request."""


class FormatError(OGFRError, ValueError):
    """A binary or JSON artifact is malformed."""


class CheckpointError(OGFRError, ValueError):
    """A checkpoint does not match the model it is loaded into."""


class NumericError(OGFRError, FloatingPointError):
    """Non-finite values appeared where finite ones are required."""

    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump
