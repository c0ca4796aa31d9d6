"""Exception types shared across the engine."""


class SgnnError(Exception):
    """Base class for all engine errors."""


class ShapeError(SgnnError):
    """Operands with incompatible dimensions."""


class TapeError(SgnnError):
    """Tape used out of order (e.g. backward before any forward)."""


class TrainingError(SgnnError):
    """Non-finite quantities or other fatal conditions during optimization."""


class ContractError(SgnnError):
    """A documented precondition was violated by the caller."""


class GramMismatchError(ContractError):
    """Witness reconstruction asked for stacks whose augmented Grams differ."""


class RolloutError(SgnnError):
    """Autoregressive prediction produced non-finite state."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite state at rollout step {step}")


class GenerationError(SgnnError):
    """Scene synthesis failed (e.g. contact tunneling; reduce dt)."""


class TrajectoryParseError(SgnnError):
    """Malformed trajectory file; carries the offending byte offset."""

    def __init__(self, offset: int, message: str):
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})")


class CheckpointFormatError(SgnnError):
    """Malformed or mismatched checkpoint file."""
