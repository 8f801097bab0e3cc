"""
Exception hierarchy for the durability lab.

Every error subclasses the builtin a caller would naturally catch
(``ValueError`` for bad inputs, ``ArithmeticError`` for numerical trouble),
so library users that only know the builtins keep working.
"""

from __future__ import annotations

from typing import Sequence


class LabError(Exception):
    """Root of all lab-specific failures."""


class ShapeMismatchError(LabError, ValueError):
    """Two operands of a tensor operation do not conform."""

    def __init__(self, op: str, left: Sequence[int], right: Sequence[int]) -> None:
        self.op = op
        self.left = tuple(left)
        self.right = tuple(right)
        super().__init__(f"{op}: shape {self.left} does not conform with {self.right}")


class NonFiniteError(LabError, ArithmeticError):
    """A NaN or Inf appeared in an intermediate value or a gradient."""

    def __init__(self, where: str) -> None:
        self.where = where
        super().__init__(f"non-finite value produced by {where}")


class DivergenceError(LabError, RuntimeError):
    """A training loop produced a non-finite loss or update."""

    def __init__(self, phase: str, step: int, cause: str = "") -> None:
        self.phase = phase
        self.step = step
        detail = f": {cause}" if cause else ""
        super().__init__(f"{phase} diverged at step {step}{detail}")


class ConfigError(LabError, ValueError):
    """An experiment or method configuration is invalid."""

    def __init__(self, field: str, message: str) -> None:
        self.field = field
        self.message = message
        super().__init__(f"{field}: {message}")

    def under(self, prefix: str, *, leaf_only: bool = False) -> "ConfigError":
        """Same error with ``prefix`` prepended to the field path."""
        leaf = self.field.split(".")[-1] if leaf_only else self.field
        return ConfigError(f"{prefix}.{leaf}", self.message)


class QuantScopeError(LabError, ValueError):
    """A quantization scope selects no weight matrix."""


class CheckpointError(LabError, OSError):
    """A parameter container is missing, truncated or has the wrong version."""


class VocabularyError(LabError, IndexError):
    """A token index lies outside its vocabulary."""

    def __init__(self, what: str, index: int, size: int) -> None:
        self.what = what
        self.index = index
        self.size = size
        super().__init__(f"{what} index {index} outside vocabulary of size {size}")
