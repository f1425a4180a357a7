"""
Equilibrium Package:
Provides the contractive maps f(z, x) which solvers iterate and gradient engines differentiate. Every map exposes
its parameters, a declared Lipschitz constant, evaluation and vector-Jacobian products w.r.t. z, x and the
parameters...
"""

import math
from abc import ABC, abstractmethod
from typing import Dict, NamedTuple, Optional

import numpy as np

from EquilibriumLab.lib import primitives as P
from EquilibriumLab.lib.errors import DomainError, ShapeError
from EquilibriumLab.lib.tape import Tape, vjp
from EquilibriumLab.lib.tensor import Precision, Tensor

# Power iteration settings used for every spectral norm in the library...
POWER_ITERATIONS = 100
POWER_TOLERANCE = 1e-10


class Cotangents(NamedTuple):
    """
    The result of pulling a cotangent back through one evaluation of f: cotangents for z, x and every parameter.
    """

    z: Tensor
    x: Tensor
    theta: Dict[str, Tensor]


class Linearization:
    """
    One recorded evaluation of f at (z, x). Holds the output and can pull any number of output cotangents back
    through the recorded graph without evaluating f again...
    """

    def __init__(self, output: Tensor, tape: Tape, z: Tensor, x: Tensor, parameters: Dict[str, Tensor]):
        self.output = output
        self._tape = tape
        self._z = z
        self._x = x
        self._parameters = parameters

    def pullback(self, cotangent: Tensor) -> Cotangents:
        grads = vjp(self._tape, cotangent, self.output)
        return Cotangents(
            grads[self._z], grads[self._x], {name: grads[param] for name, param in self._parameters.items()}
        )

    def stored_tensors(self) -> int:
        return self._tape.stored_tensors()


class EquilibriumFunction(ABC):
    """
    Abstract class for the parameterised maps f_theta(z, x) whose fixed points define an equilibrium layer.
    Instances are immutable, so they may be shared between concurrent solves.
    """

    __ERROR_MSG = "Subclass doesn't implement this method!!!"

    def __init__(self, parameters: Dict[str, Tensor], lipschitz: Optional[float]):
        self._parameters = dict(parameters)
        self._lipschitz = lipschitz

    @property
    def parameters(self) -> Dict[str, Tensor]:
        """
        Get the named parameter tensors of this map, in a fixed order.
        """
        return dict(self._parameters)

    @property
    def lipschitz(self) -> Optional[float]:
        """
        The declared Lipschitz constant k of this map w.r.t. z in the l2 norm, or None if unknown.
        """
        return self._lipschitz

    @property
    @abstractmethod
    def width(self) -> int:
        """
        The dimension of the state z (and of the output).
        """
        raise NotImplementedError(self.__ERROR_MSG)

    @property
    @abstractmethod
    def input_width(self) -> int:
        """
        The dimension of the injected input x.
        """
        raise NotImplementedError(self.__ERROR_MSG)

    @abstractmethod
    def eval(self, z: Tensor, x: Tensor) -> Tensor:
        """
        Evaluate f at (z, x) using library primitives, so the evaluation is recorded when a tape is active. The
        evaluation is carried out at the precision of z.

        :param z: The state, shape (width,) or (B, width).
        :param x: The input, shape (input_width,) or (B, input_width).
        :return: A Tensor shaped like z.
        """
        raise NotImplementedError(self.__ERROR_MSG)

    @abstractmethod
    def with_parameters(self, parameters: Dict[str, Tensor]) -> "EquilibriumFunction":
        """
        Create the same kind of map with different parameter values (same names and shapes).
        """
        raise NotImplementedError(self.__ERROR_MSG)

    def __call__(self, z: Tensor, x: Tensor) -> Tensor:
        return self.eval(z, x)

    def _param(self, name: str, precision: Precision) -> Tensor:
        return P.cast(self._parameters[name], precision)

    def _check_state(self, z: Tensor, x: Tensor):
        if z.shape[-1:] != (self.width,) or x.shape[-1:] != (self.input_width,) or z.shape[:-1] != x.shape[:-1]:
            raise ShapeError(type(self).__name__, z.shape, x.shape)

    def linearize(self, z: Tensor, x: Tensor) -> Linearization:
        """
        Evaluate f at (z, x) on a fresh tape, watching z, x and the parameters.

        :return: A Linearization, holding the output and the pullback of this evaluation.
        """
        parameters = self.parameters
        with Tape() as tape:
            tape.watch(z, x, *parameters.values())
            output = self.eval(z, x)
        return Linearization(output, tape, z, x, parameters)

    def vjp_z(self, z: Tensor, x: Tensor, cotangent: Tensor) -> Tensor:
        return self.linearize(z, x).pullback(cotangent).z

    def vjp_x(self, z: Tensor, x: Tensor, cotangent: Tensor) -> Tensor:
        return self.linearize(z, x).pullback(cotangent).x

    def vjp_theta(self, z: Tensor, x: Tensor, cotangent: Tensor) -> Dict[str, Tensor]:
        return self.linearize(z, x).pullback(cotangent).theta

    def zero_input(self, batch: Optional[int] = None, precision: Precision = Precision.DOUBLE) -> Tensor:
        shape = (self.input_width,) if batch is None else (batch, self.input_width)
        return Tensor.zeros(shape, precision)

    def zero_state(self, batch: Optional[int] = None, precision: Precision = Precision.DOUBLE) -> Tensor:
        shape = (self.width,) if batch is None else (batch, self.width)
        return Tensor.zeros(shape, precision)


def flatten_parameters(parameters: Dict[str, Tensor]) -> np.ndarray:
    """
    Concatenate parameter tensors, in their dictionary order, into one double precision vector.
    """
    if not parameters:
        return np.zeros(0)
    return np.concatenate([tensor.numpy().astype(np.float64).ravel() for tensor in parameters.values()])


def unflatten_parameters(flat: np.ndarray, like: Dict[str, Tensor]) -> Dict[str, Tensor]:
    """
    Split a flat vector back into named tensors shaped (and with the precision of) the tensors in like.
    """
    flat = np.asarray(flat, dtype=np.float64)
    result = {}
    offset = 0

    for name, tensor in like.items():
        result[name] = Tensor(flat[offset : offset + tensor.size].reshape(tensor.shape), tensor.precision)
        offset += tensor.size

    if offset != flat.size:
        raise ShapeError("unflatten_parameters", (offset,), flat.shape)

    return result


def spectral_norm(
    matrix: np.ndarray, iterations: int = POWER_ITERATIONS, tol: float = POWER_TOLERANCE, seed: int = 0
) -> float:
    """
    Estimate the largest singular value of a matrix by power iteration.

    :param matrix: A 2-d array.
    :param iterations: Maximum number of power iterations.
    :param tol: Stop once successive estimates differ by less than tol relative to the estimate.
    :param seed: Seed of the random starting vector.
    :return: The spectral norm estimate, 0 for the zero matrix...
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    u = np.random.default_rng(seed).standard_normal(matrix.shape[1])
    u /= np.linalg.norm(u)
    sigma = 0.0

    for __ in range(iterations):
        v = matrix @ u
        v_norm = np.linalg.norm(v)
        if v_norm == 0:
            return 0.0
        v /= v_norm
        u = matrix.T @ v
        new_sigma = float(np.linalg.norm(u))
        if new_sigma == 0:
            return 0.0
        u /= new_sigma
        converged = abs(new_sigma - sigma) <= tol * new_sigma
        sigma = new_sigma
        if converged:
            break

    return sigma


class LinearCell(EquilibriumFunction):
    """
    The affine map f(z, x) = A z + b + x. With an operator norm of A below one this is the canonical contraction,
    and its fixed point is available in closed form...
    """

    def __init__(self, A: Tensor, b: Tensor, lipschitz: Optional[float] = None):
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ShapeError("LinearCell", A.shape, (A.shape[0], A.shape[0]))
        if b.shape != (A.shape[0],):
            raise ShapeError("LinearCell", A.shape, b.shape)

        if lipschitz is None:
            lipschitz = spectral_norm(A.numpy())

        super().__init__({"A": A, "b": b}, lipschitz)

    @property
    def width(self) -> int:
        return self._parameters["b"].shape[0]

    @property
    def input_width(self) -> int:
        return self.width

    def eval(self, z: Tensor, x: Tensor) -> Tensor:
        self._check_state(z, x)
        A = self._param("A", z.precision)
        b = self._param("b", z.precision)
        return P.add(P.add_bias(P.matmul(A, z), b), x)

    def with_parameters(self, parameters: Dict[str, Tensor]) -> "LinearCell":
        return LinearCell(parameters["A"], parameters["b"])

    def fixed_point(self, x: Tensor) -> np.ndarray:
        """
        Solve (I - A) q = b + x directly.

        :param x: The input, shape (width,) or (B, width).
        :return: The analytic fixed point q*, shaped like x.
        """
        A = self._parameters["A"].numpy().astype(np.float64)
        rhs = self._parameters["b"].numpy().astype(np.float64) + x.numpy().astype(np.float64)
        system = np.eye(self.width) - A
        if rhs.ndim == 1:
            return np.linalg.solve(system, rhs)
        return np.linalg.solve(system, rhs.T).T


class MlpCell(EquilibriumFunction):
    """
    Two affine layers with an activation in between and the input injected after the first layer:

        f(z, x) = W2 act(W1 z + b1 + x) + b2

    The activation has slope at most one, so the product of the spectral norms of W1 and W2 bounds the Lipschitz
    constant w.r.t. z.
    """

    def __init__(
        self,
        W1: Tensor,
        b1: Tensor,
        W2: Tensor,
        b2: Tensor,
        lipschitz: Optional[float] = None,
        activation: str = "tanh",
    ):
        hidden, width = W1.shape
        if W2.shape != (width, hidden) or b1.shape != (hidden,) or b2.shape != (width,):
            raise ShapeError("MlpCell", W1.shape, W2.shape)
        if activation not in P.ACTIVATIONS:
            raise DomainError(f"Unknown activation {activation!r}, expected one of {list(P.ACTIVATIONS)}")

        if lipschitz is None:
            lipschitz = spectral_norm(W1.numpy()) * spectral_norm(W2.numpy())

        self._activation = activation
        super().__init__({"W1": W1, "b1": b1, "W2": W2, "b2": b2}, lipschitz)

    @property
    def width(self) -> int:
        return self._parameters["b2"].shape[0]

    @property
    def input_width(self) -> int:
        return self._parameters["b1"].shape[0]

    @property
    def hidden(self) -> int:
        return self.input_width

    @property
    def activation(self) -> str:
        return self._activation

    def eval(self, z: Tensor, x: Tensor) -> Tensor:
        self._check_state(z, x)
        precision = z.precision
        pre = P.add(P.add_bias(P.matmul(self._param("W1", precision), z), self._param("b1", precision)), x)
        hidden = P.activation(pre, self._activation)
        return P.add_bias(P.matmul(self._param("W2", precision), hidden), self._param("b2", precision))

    def with_parameters(self, parameters: Dict[str, Tensor]) -> "MlpCell":
        return MlpCell(
            parameters["W1"], parameters["b1"], parameters["W2"], parameters["b2"], activation=self._activation
        )

    def project_lipschitz(self, target_k: float) -> "MlpCell":
        """
        Pull the cell back inside the contraction bound target_k. When the product of the layer norms exceeds
        target_k, W1 and W2 are both scaled by sqrt(target_k / product), otherwise the cell is returned unchanged.
        Optimizers call this after every update, so training never leaves the contractive family...

        :param target_k: The bound, must lie in (0, 1).
        :return: An MlpCell whose declared Lipschitz constant is at most target_k.
        """
        if not 0 < target_k < 1:
            raise DomainError(f"target_k must lie in the open interval (0, 1), got {target_k!r}")
        if self._lipschitz <= target_k:
            return self

        factor = math.sqrt(target_k / self._lipschitz)
        W1 = self._parameters["W1"]
        W2 = self._parameters["W2"]
        return MlpCell(
            Tensor(W1.numpy() * factor, W1.precision),
            self._parameters["b1"],
            Tensor(W2.numpy() * factor, W2.precision),
            self._parameters["b2"],
            lipschitz=target_k,
            activation=self._activation,
        )


def make_linear_cell(A, b, target_k: Optional[float] = None) -> LinearCell:
    """
    Build a LinearCell f(z, x) = A z + b + x.

    :param A: A square matrix (anything numpy accepts).
    :param b: A vector with A's dimension.
    :param target_k: Optional, if given A is rescaled so its spectral norm equals target_k, which must lie in (0, 1).
    :return: The LinearCell. Its declared k is the spectral norm actually achieved.
    """
    A = np.array(A, dtype=np.float64)
    b = np.array(b, dtype=np.float64)

    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeError("make_linear_cell", A.shape, (A.shape[0], A.shape[0]) if A.ndim else ())

    if target_k is not None:
        if not 0 < target_k < 1:
            raise DomainError(f"target_k must lie in the open interval (0, 1), got {target_k!r}")
        sigma = spectral_norm(A)
        if sigma > 0:
            A = A * (target_k / sigma)

    return LinearCell(Tensor(A), Tensor(b))


def make_diagonal_cell(k: float, width: int = 2, offset: float = 1.0) -> LinearCell:
    """
    A LinearCell with A = diag(k, 0.6 k, ...) and b = offset. The largest diagonal entry is exactly k, so the
    declared constant is known without estimation.
    """
    diagonal = k * np.linspace(1.0, 0.6, width) if width > 1 else np.array([k])
    return LinearCell(Tensor(np.diag(diagonal)), Tensor(np.full(width, offset)), lipschitz=abs(float(k)))


def make_mlp_cell(width: int, hidden: int, target_k: float, seed: int, activation: str = "tanh") -> MlpCell:
    """
    Build an MlpCell with deterministic random weights, spectrally scaled so the product of the layer norms is
    target_k.

    :param width: The dimension of z.
    :param hidden: The hidden dimension (also the dimension of x).
    :param target_k: The Lipschitz bound, must lie in (0, 1).
    :param seed: Seed of the initialisation. Equal seeds give bit-identical parameters.
    :param activation: "tanh" (default) or "relu".
    :return: The MlpCell.
    """
    if not 0 < target_k < 1:
        raise DomainError(f"target_k must lie in the open interval (0, 1), got {target_k!r}")
    if width < 1 or hidden < 1:
        raise DomainError(f"width and hidden must be positive, got {width!r} and {hidden!r}")

    rng = np.random.default_rng(seed)
    W1 = rng.standard_normal((hidden, width)) / math.sqrt(width)
    W2 = rng.standard_normal((width, hidden)) / math.sqrt(hidden)
    b1 = 0.1 * rng.standard_normal(hidden)
    b2 = 0.1 * rng.standard_normal(width)

    # Split the bound evenly between the two layers...
    layer_k = math.sqrt(target_k)
    W1 *= layer_k / spectral_norm(W1)
    W2 *= layer_k / spectral_norm(W2)

    return MlpCell(Tensor(W1), Tensor(b1), Tensor(W2), Tensor(b2), activation=activation)


def estimate_lipschitz(f: EquilibriumFunction, num_pairs: int, seed: int, radius: float = 1.0) -> float:
    """
    Empirical lower bound on the Lipschitz constant of f w.r.t. z: the largest ratio |f(z) - f(z')| / |z - z'| (l2
    norms) over random pairs, with x held at zero.

    :param f: The map to measure.
    :param num_pairs: The number of pairs to sample, at least 1.
    :param seed: Seed of the sampler.
    :param radius: Standard deviation of the sampled points.
    :return: The largest observed ratio.
    """
    if num_pairs < 1:
        raise DomainError(f"num_pairs must be at least 1, got {num_pairs!r}")

    rng = np.random.default_rng(seed)
    first = radius * rng.standard_normal((num_pairs, f.width))
    second = radius * rng.standard_normal((num_pairs, f.width))

    # Coincident pairs are resampled, a zero denominator never occurs...
    coincident = np.linalg.norm(first - second, axis=1) == 0
    while np.any(coincident):
        second[coincident] = radius * rng.standard_normal((int(coincident.sum()), f.width))
        coincident = np.linalg.norm(first - second, axis=1) == 0

    x = f.zero_input(num_pairs)
    out_first = f.eval(Tensor(first), x).numpy()
    out_second = f.eval(Tensor(second), x).numpy()

    ratios = np.linalg.norm(out_first - out_second, axis=1) / np.linalg.norm(first - second, axis=1)
    return float(np.max(ratios))
