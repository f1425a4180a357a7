"""
Tape Package:
Reverse-mode automatic differentiation. Primitives executed while a Tape is active are recorded on it, together
with the rule that maps an output cotangent to input cotangents. Replaying the rules in reverse order yields the
vector-Jacobian product of the recorded composite function. Also provides the central finite difference oracle
used to check those products...
"""

import threading
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from EquilibriumLab.lib.errors import DomainError, NonFiniteError, ShapeError
from EquilibriumLab.lib.tensor import Tensor

# Default central difference step, a truncation/rounding compromise at double precision...
DEFAULT_FD_EPS = 1e-5

Pullback = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

# Active tapes are per thread, so independent solves on different threads never record onto each other's tape.
_ACTIVE = threading.local()


def _active_stack() -> List["Tape"]:
    if not hasattr(_ACTIVE, "stack"):
        _ACTIVE.stack = []
    return _ACTIVE.stack


def active_tape() -> Optional["Tape"]:
    """
    Get the innermost tape active on this thread, or None if nothing is being recorded.
    """
    stack = _active_stack()
    return stack[-1] if stack else None


class TapeRecord:
    """
    One recorded primitive: its name, the tensors it consumed, the tensor it produced and its pullback.
    """

    __slots__ = ("op", "inputs", "output", "pullback")

    def __init__(self, op: str, inputs: Tuple[Tensor, ...], output: Tensor, pullback: Pullback):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.pullback = pullback


class Tape:
    """
    An ordered list of recorded primitives. Used as a context manager: every primitive executed inside the 'with'
    block is appended to the tape. A tape belongs to a single solve and must not be shared between threads...
    """

    def __init__(self):
        self._records: List[TapeRecord] = []
        self._leaves: List[Tensor] = []
        self._leaf_ids = set()

    def __enter__(self) -> "Tape":
        _active_stack().append(self)
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        _active_stack().pop()

    def watch(self, *tensors: Tensor) -> "Tape":
        """
        Mark tensors as leaves, the inputs which vjp returns cotangents for.

        :param tensors: The tensors to mark.
        :return: This tape, for chaining...
        """
        for tensor in tensors:
            if id(tensor) not in self._leaf_ids:
                self._leaf_ids.add(id(tensor))
                self._leaves.append(tensor)
        return self

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, pullback: Pullback):
        self._records.append(TapeRecord(op, tuple(inputs), output, pullback))

    @property
    def records(self) -> Tuple[TapeRecord, ...]:
        return tuple(self._records)

    @property
    def leaves(self) -> Tuple[Tensor, ...]:
        return tuple(self._leaves)

    @property
    def last_output(self) -> Tensor:
        if not self._records:
            raise ValueError("Tape is empty, nothing was recorded!")
        return self._records[-1].output

    def stored_tensors(self) -> int:
        """
        Count the distinct tensors this tape keeps alive (leaves, recorded inputs and outputs).
        """
        seen = set(self._leaf_ids)
        for record in self._records:
            seen.add(id(record.output))
            seen.update(id(tensor) for tensor in record.inputs)
        return len(seen)

    def __len__(self) -> int:
        return len(self._records)


def vjp(tape: Tape, output_cotangent: Tensor, output: Optional[Tensor] = None) -> Dict[Tensor, Tensor]:
    """
    Replay the VJP rules of a tape in reverse order.

    :param tape: The tape recorded during the forward evaluation.
    :param output_cotangent: The cotangent of the output, must have the output's shape.
    :param output: The tensor the cotangent belongs to, defaults to the last recorded output.
    :return: A dictionary mapping every leaf of the tape to its cotangent. Leaves the output does not depend on
             get a zero cotangent.
    """
    output = tape.last_output if output is None else output

    if output_cotangent.shape != output.shape:
        raise ShapeError("vjp", output.shape, output_cotangent.shape)

    cotangents: Dict[int, np.ndarray] = {id(output): output_cotangent.numpy().astype(output.numpy().dtype)}

    for record in reversed(tape.records):
        grad = cotangents.get(id(record.output))
        if grad is None:
            continue

        for tensor, input_grad in zip(record.inputs, record.pullback(grad)):
            if input_grad is None:
                continue
            key = id(tensor)
            if key in cotangents:
                cotangents[key] = cotangents[key] + input_grad
            else:
                cotangents[key] = input_grad

    return {
        leaf: Tensor.wrap(cotangents[id(leaf)]) if id(leaf) in cotangents else Tensor.zeros_like(leaf)
        for leaf in tape.leaves
    }


def _as_float(value: Union[Tensor, float, np.ndarray]) -> float:
    if isinstance(value, Tensor):
        return value.item()
    return float(np.asarray(value).item())


def finite_diff_grad(
    func: Callable[[Tensor], Union[Tensor, float]], params: Tensor, eps: float = DEFAULT_FD_EPS
) -> Tensor:
    """
    Central finite difference gradient of a scalar function of a parameter tensor.

    :param func: Deterministic scalar valued callable taking a Tensor shaped like params.
    :param params: The point to differentiate at.
    :param eps: The perturbation applied to each coordinate, must be positive.
    :return: A Tensor shaped like params, (func(p + eps e_i) - func(p - eps e_i)) / (2 eps) per coordinate.
    """
    if not eps > 0:
        raise DomainError(f"Finite difference step must be positive, got {eps!r}")

    base = params.numpy().astype(np.float64).ravel()
    grad = np.empty_like(base)

    for i in range(base.size):
        values = []
        for sign in (1.0, -1.0):
            point = base.copy()
            point[i] += sign * eps
            value = _as_float(func(Tensor(point.reshape(params.shape), params.precision)))
            if not np.isfinite(value):
                raise NonFiniteError(i, value)
            values.append(value)
        grad[i] = (values[0] - values[1]) / (2 * eps)

    return Tensor(grad.reshape(params.shape), params.precision)
