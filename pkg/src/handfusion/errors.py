"""Exception hierarchy shared across the package.

Validation failures (bad shapes, out-of-range values, malformed records)
raise :class:`ValidationError`; everything else that the package raises on
purpose derives from :class:`HandfusionError` so the CLI can map exceptions
to exit codes.
"""


class HandfusionError(Exception):
    """Base class for errors raised by this package."""


class ValidationError(HandfusionError, ValueError):
    """Input violates a documented precondition or invariant."""


class RecordFormatError(ValidationError):
    """A serialized record (mesh file, manifest, checkpoint) is malformed."""

    def __init__(self, message, field=None):
        self.field = field
        super().__init__(message if field is None else f"{message} (field: {field})")


class CheckpointError(HandfusionError):
    """Checkpoint integrity or compatibility failure."""


class TrainStepError(HandfusionError):
    """A training step had to be aborted; trainer state is unchanged."""

    def __init__(self, step, message):
        self.step = step
        super().__init__(f"step {step}: {message}")
