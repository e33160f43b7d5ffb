"""Error types shared across the package.

The CLI maps these onto exit codes: argument/shape problems -> 2,
checkpoint problems -> 3, data problems -> 4.
"""


class ShapeMismatchError(ValueError):
    """Tensor/array shapes are inconsistent with the declared contract."""


class DataError(RuntimeError):
    """Dataset missing, empty, or unreadable."""


class CheckpointError(RuntimeError):
    """Checkpoint file corrupt, truncated, or missing required entries."""


class InvalidStateError(RuntimeError):
    """Operation invoked before its prerequisites (weights, plans) exist."""
