"""
Errors raised by the EquilibriumLab library. Every error carries the values needed to explain it, so callers (and
the command line) can report what went wrong without re-deriving it...
"""

from typing import Any, Optional, Sequence


class EquilibriumError(Exception):
    """
    Base class of all errors raised by this library.
    """


class ShapeError(EquilibriumError, ValueError):
    """
    Raised when two operands of a primitive have incompatible shapes.
    """

    def __init__(self, op: str, left: Sequence[int], right: Sequence[int]):
        self.op = op
        self.left = tuple(left)
        self.right = tuple(right)
        super().__init__(f"{op}: incompatible shapes {self.left} and {self.right}")


class PrecisionError(EquilibriumError, ValueError):
    """
    Raised when two operands of a primitive carry different element precisions.
    """

    def __init__(self, op: str, left: Any, right: Any):
        self.op = op
        self.left = left
        self.right = right
        super().__init__(f"{op}: mixed precisions {left} and {right}")


class ConfigError(EquilibriumError, ValueError):
    """
    Raised when a configuration value violates its constraint, or a configuration key is unknown.
    """

    def __init__(self, key: str, constraint: str):
        self.key = key
        self.constraint = constraint
        super().__init__(f"Invalid configuration '{key}': {constraint}")


class DomainError(EquilibriumError, ValueError):
    """
    Raised when a scalar argument lies outside the domain of a formula (for example k >= 1 in a rate constant).
    """


class DivergenceError(EquilibriumError, ArithmeticError):
    """
    Raised when a fixed point iteration produces a non-finite or exploding iterate. Keeps the last finite state so
    the caller can inspect it...
    """

    def __init__(self, step: int, residual: float, last_state: Any = None):
        self.step = step
        self.residual = residual
        self.last_state = last_state
        super().__init__(f"Iteration diverged at step {step} (residual {residual!r})")


class ReconstructionError(EquilibriumError, ArithmeticError):
    """
    Raised when reversing the solver produces non-finite values.
    """

    def __init__(self, step: int):
        self.step = step
        super().__init__(f"Reconstruction produced non-finite values at step {step}")


class NonFiniteError(EquilibriumError, ArithmeticError):
    """
    Raised by the finite difference oracle when the function returns a non-finite value.
    """

    def __init__(self, coordinate: int, value: Optional[float] = None):
        self.coordinate = coordinate
        self.value = value
        super().__init__(f"Non-finite function value {value!r} while perturbing coordinate {coordinate}")


class FormatError(EquilibriumError, SyntaxError):
    """
    Raised when a checkpoint or configuration file is malformed.
    """
