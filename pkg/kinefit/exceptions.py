"""Exception types raised by kinefit.

Each error also derives from the closest built-in so callers can keep
catching ``ValueError`` / ``RuntimeError``.
"""

from typing import Any


class KinefitError(Exception):
    """Base class for all kinefit errors."""


class ModelSyntaxError(KinefitError, ValueError):
    """A model file line could not be tokenized or a value could not be read."""

    def __init__(self, message: str, line: int, column: int):
        self.line = line
        self.column = column
        super().__init__(f"line {line}, column {column}: {message}")


class ModelSemanticError(KinefitError, ValueError):
    """A model file parsed but describes an invalid skeleton."""

    def __init__(self, message: str, element: str):
        self.element = element
        super().__init__(f"{element}: {message}")


class ShapeError(KinefitError, ValueError):
    """Array dimensions do not match what an operation expects."""


class NonFiniteError(KinefitError, FloatingPointError):
    """A traced operation produced NaN or infinity."""

    def __init__(self, message: str, node_index: int | None = None, op: str | None = None):
        self.node_index = node_index
        self.op = op
        if node_index is not None:
            message = f"node {node_index} ({op}): {message}"
        super().__init__(message)


class BehindCameraError(KinefitError, ValueError):
    """A point has non-positive depth in the camera frame."""


class TrialFormatError(KinefitError, ValueError):
    """A trial file pair is missing, malformed, or truncated."""

    def __init__(self, message: str, path: str, expected_bytes: int | None = None):
        self.path = path
        self.expected_bytes = expected_bytes
        super().__init__(f"{path}: {message}")


class DegenerateGeometryError(KinefitError, ValueError):
    """Correspondences do not constrain the requested transform."""


class MetricUndefinedError(KinefitError, ValueError):
    """A metric has no observations to be computed from."""


class DivergenceError(KinefitError, RuntimeError):
    """The loss stayed non-finite for too many consecutive iterations."""

    def __init__(self, message: str, iteration: int, snapshot: dict[str, Any]):
        self.iteration = iteration
        self.snapshot = snapshot
        super().__init__(f"iteration {iteration}: {message}")
