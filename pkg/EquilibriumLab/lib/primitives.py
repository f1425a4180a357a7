"""
The primitive operations of the library. Each primitive validates its operands, computes its result with numpy at
the operands' precision, and records itself on the active tape (if any) with the VJP rule registered for it in
VJP_RULES. Only the operations needed by the contractive cells exist; add_bias is the only broadcasting form...
"""

from typing import Callable, Dict, Optional, Tuple, Union

import numpy as np

from EquilibriumLab.lib.errors import ConfigError, PrecisionError, ShapeError
from EquilibriumLab.lib.tape import active_tape
from EquilibriumLab.lib.tensor import Precision, Tensor

# Maps primitive name -> rule(cotangent, *input arrays, output array, **attributes) -> input cotangents...
VJP_RULES: Dict[str, Callable[..., Tuple[Optional[np.ndarray], ...]]] = {}

ACTIVATIONS = ("tanh", "relu")
NORM_KINDS = ("l2", "max")


def defvjp(name: str):
    """
    Decorator registering the VJP rule of the primitive called name.
    """

    def register(rule):
        VJP_RULES[name] = rule
        return rule

    return register


def _apply(name: str, inputs: Tuple[Tensor, ...], result: np.ndarray, **attrs) -> Tensor:
    """
    PRIVATE METHOD:
    Wrap a primitive's result and record it on the active tape...
    """
    output = Tensor.wrap(result)
    tape = active_tape()

    if tape is not None:
        arrays = tuple(tensor.numpy() for tensor in inputs)
        rule = VJP_RULES[name]
        out_array = output.numpy()
        tape.record(name, inputs, output, lambda grad: rule(grad, *arrays, out_array, **attrs))

    return output


def _check_pair(op: str, a: Tensor, b: Tensor, same_shape: bool = True):
    if a.precision is not b.precision:
        raise PrecisionError(op, a.precision.value, b.precision.value)
    if same_shape and a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_pair("add", a, b)
    return _apply("add", (a, b), a.numpy() + b.numpy())


@defvjp("add")
def _add_vjp(grad, a, b, out):
    return grad, grad


def subtract(a: Tensor, b: Tensor) -> Tensor:
    _check_pair("subtract", a, b)
    return _apply("subtract", (a, b), a.numpy() - b.numpy())


@defvjp("subtract")
def _subtract_vjp(grad, a, b, out):
    return grad, -grad


def multiply(a: Tensor, b: Tensor) -> Tensor:
    """
    Elementwise product of two tensors of identical shape.
    """
    _check_pair("multiply", a, b)
    return _apply("multiply", (a, b), a.numpy() * b.numpy())


@defvjp("multiply")
def _multiply_vjp(grad, a, b, out):
    return grad * b, grad * a


def scale(a: Tensor, c: float) -> Tensor:
    """
    Multiply a tensor by a constant scalar. The scalar is rounded to the tensor's precision first.
    """
    c = a.numpy().dtype.type(c)
    return _apply("scale", (a,), a.numpy() * c, c=c)


@defvjp("scale")
def _scale_vjp(grad, a, out, c):
    return (grad * c,)


def matmul(A: Tensor, v: Tensor) -> Tensor:
    """
    Apply matrix A to v. v is either a vector of length A.shape[1], or a row batch of shape (B, A.shape[1]) in which
    case A is applied to every row.

    :param A: A matrix Tensor of shape (m, n).
    :param v: A Tensor of shape (n,) or (B, n).
    :return: A Tensor of shape (m,) or (B, m).
    """
    _check_pair("matmul", A, v, same_shape=False)

    if A.ndim != 2 or v.ndim not in (1, 2) or v.shape[-1] != A.shape[1]:
        raise ShapeError("matmul", A.shape, v.shape)

    if v.ndim == 1:
        result = A.numpy() @ v.numpy()
    else:
        result = v.numpy() @ A.numpy().T

    return _apply("matmul", (A, v), result)


@defvjp("matmul")
def _matmul_vjp(grad, A, v, out):
    if v.ndim == 1:
        return np.outer(grad, v), A.T @ grad
    return grad.T @ v, grad @ A


def add_bias(a: Tensor, b: Tensor) -> Tensor:
    """
    Add the vector b to every row of a (the trailing axis of a must match b).
    """
    _check_pair("add_bias", a, b, same_shape=False)

    if b.ndim != 1 or a.shape[-1:] != b.shape:
        raise ShapeError("add_bias", a.shape, b.shape)

    return _apply("add_bias", (a, b), a.numpy() + b.numpy())


@defvjp("add_bias")
def _add_bias_vjp(grad, a, b, out):
    return grad, grad.reshape(-1, b.shape[0]).sum(axis=0)


def tanh(a: Tensor) -> Tensor:
    return _apply("tanh", (a,), np.tanh(a.numpy()))


@defvjp("tanh")
def _tanh_vjp(grad, a, out):
    return (grad * (1 - out * out),)


def relu(a: Tensor) -> Tensor:
    return _apply("relu", (a,), np.maximum(a.numpy(), 0))


@defvjp("relu")
def _relu_vjp(grad, a, out):
    return (grad * (a > 0),)


def divide(a: Tensor, c: float) -> Tensor:
    """
    Divide a tensor by a constant non-zero scalar, rounded to the tensor's precision first.
    """
    c = a.numpy().dtype.type(c)
    if c == 0:
        raise ZeroDivisionError("divide: division of a tensor by zero")
    return _apply("divide", (a,), a.numpy() / c, c=c)


@defvjp("divide")
def _divide_vjp(grad, a, out, c):
    return (grad / c,)


def activation(a: Tensor, kind: str) -> Tensor:
    """
    Apply the elementwise activation named kind ("tanh" or "relu").
    """
    if kind == "tanh":
        return tanh(a)
    if kind == "relu":
        return relu(a)
    raise ConfigError("activation", f"must be one of {list(ACTIVATIONS)}, got {kind!r}")


def cast(a: Tensor, precision: Union[str, Precision]) -> Tensor:
    """
    Convert a tensor to another precision. Casting to the tensor's own precision returns it unchanged (nothing is
    recorded).
    """
    precision = Precision.parse(precision)
    if precision is a.precision:
        return a
    return _apply("cast", (a,), a.numpy().astype(precision.dtype))


@defvjp("cast")
def _cast_vjp(grad, a, out):
    return (grad.astype(a.dtype),)


def total(a: Tensor) -> Tensor:
    """
    Sum of all elements, as a 0-d Tensor.
    """
    return _apply("sum", (a,), np.asarray(a.numpy().sum()))


@defvjp("sum")
def _sum_vjp(grad, a, out):
    return (np.full(a.shape, grad, dtype=a.dtype),)


def vector_norm(a: Tensor, kind: str = "l2") -> Tensor:
    """
    Norm of all the elements of a, as a 0-d Tensor.

    :param a: The tensor to measure.
    :param kind: "l2" for the euclidean norm, "max" for the largest absolute element.
    """
    values = a.numpy()

    if kind == "l2":
        result = np.sqrt(np.sum(values * values))
    elif kind == "max":
        result = np.max(np.abs(values)) if values.size else values.dtype.type(0)
    else:
        raise ConfigError("norm", f"must be one of {list(NORM_KINDS)}, got {kind!r}")

    return _apply("vector_norm", (a,), np.asarray(result, dtype=values.dtype), kind=kind)


@defvjp("vector_norm")
def _vector_norm_vjp(grad, a, out, kind):
    result = np.zeros_like(a)

    if kind == "l2":
        if out > 0:
            result = grad * a / out
    elif a.size:
        # Subgradient: all weight on the first largest coordinate.
        index = np.unravel_index(np.argmax(np.abs(a)), a.shape)
        result[index] = grad * np.sign(a[index])

    return (result,)
