"""Shared exception types."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(ValueError):
    """A configuration value is out of range or unparseable."""


class ContractError(RuntimeError):
    """An API precondition was violated by the caller."""


class GraphError(ContractError):
    """Misuse of the autodiff graph (non-scalar loss, reused graph)."""


class DataError(ValueError):
    """Input data violates a documented contract (e.g. out-of-range label)."""


class PGMParseError(ValueError):
    """Malformed PGM file. Carries the byte offset of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointError(ValueError):
    """Checkpoint file is corrupt, wrong version, or mismatched."""
