"""
Solvers Package:
Forward fixed point solvers for equilibrium functions: the naive iteration, the relaxed (damped) iteration and the
reversible coupled iteration, together with the closed form inverse of one reversible step and the rate constants
that bound the coupled scheme's convergence...

The reversible step, from y_0 = z_0 = 0:

    y_{n+1} = (1 - beta) y_n + beta f(z_n, x)
    z_{n+1} = (1 - beta) z_n + beta f(y_{n+1}, x)

and its inverse:

    z_n = (z_{n+1} - beta f(y_{n+1}, x)) / (1 - beta)
    y_n = (y_{n+1} - beta f(z_n, x)) / (1 - beta)
"""

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Iterator, Optional, Tuple, Union

import numpy as np

from EquilibriumLab.lib import primitives as P
from EquilibriumLab.lib.equilibrium import EquilibriumFunction, Linearization
from EquilibriumLab.lib.errors import ConfigError, DivergenceError, DomainError
from EquilibriumLab.lib.tensor import PrecisionPolicy, Tensor

logger = logging.getLogger(__name__)

# |1 - beta| must stay above this for any engine that reverses the solver...
BETA_FLOOR = 1e-3
# Residuals beyond this abort the solve as diverged.
DIVERGENCE_THRESHOLD = 1e12

STOP_RULES = ("fixed_steps", "residual")


@dataclass(frozen=True)
class SolverConfig:
    """
    Settings of a fixed point solve. Defaults: beta = 0.8, tol = 1e-6, 8 steps, double precision, stopping on the
    residual.
    """

    beta: float = 0.8
    tol: float = 1e-6
    max_steps: int = 8
    precision_policy: PrecisionPolicy = field(default_factory=PrecisionPolicy)
    stop_rule: str = "residual"

    def validate(self, reversible: bool = True) -> "SolverConfig":
        """
        Check every field against its constraint.

        :param reversible: Also require |1 - beta| >= BETA_FLOOR, needed by engines that invert the solver.
        :return: This config, so calls can be chained...
        """
        if not 0 < self.beta < 2:
            raise ConfigError("beta", f"must lie in the open interval (0, 2), got {self.beta!r}")
        if reversible and abs(1 - self.beta) < BETA_FLOOR:
            raise ConfigError(
                "beta",
                f"the reversible solver divides by 1 - beta, so |1 - beta| must be at least {BETA_FLOOR} "
                f"(got beta = {self.beta!r})",
            )
        if not self.tol > 0:
            raise ConfigError("tol", f"must be positive, got {self.tol!r}")
        if int(self.max_steps) != self.max_steps or self.max_steps < 0:
            raise ConfigError("max_steps", f"must be a non-negative integer, got {self.max_steps!r}")
        if self.stop_rule not in STOP_RULES:
            raise ConfigError("stop_rule", f"must be one of {list(STOP_RULES)}, got {self.stop_rule!r}")
        if not isinstance(self.precision_policy, PrecisionPolicy):
            raise ConfigError("precision_policy", f"must be a PrecisionPolicy, got {self.precision_policy!r}")
        return self

    def replace(self, **changes) -> "SolverConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class ReversibleState:
    """
    The coupled pair (y_n, z_n) of the reversible solver and the step index n.
    """

    y: Tensor
    z: Tensor
    step: int

    def __post_init__(self):
        if self.y.shape != self.z.shape:
            raise ValueError(f"Coupled states must share a shape, got {self.y.shape} and {self.z.shape}")


@dataclass(frozen=True)
class SolveResult:
    """
    Outcome of a solve. For the reversible solver state is the terminal ReversibleState, for the other solvers it
    is the terminal z. nfe counts evaluations of f during the forward solve.
    """

    state: Union[ReversibleState, Tensor]
    residual: float
    steps_taken: int
    nfe: int
    converged: bool
    solver: str
    beta: float = 1.0

    @property
    def z(self) -> Tensor:
        return self.state.z if isinstance(self.state, ReversibleState) else self.state

    @property
    def y(self) -> Optional[Tensor]:
        return self.state.y if isinstance(self.state, ReversibleState) else None


def _max_abs_diff(a: Tensor, b: Tensor) -> float:
    diff = a.numpy().astype(np.float64) - b.numpy().astype(np.float64)
    return float(np.max(np.abs(diff))) if diff.size else 0.0


def _initial_state(f: EquilibriumFunction, x: Tensor, policy: PrecisionPolicy) -> Tensor:
    return Tensor.zeros(x.shape[:-1] + (f.width,), policy.accumulate)


def _evaluate(f: EquilibriumFunction, state: Tensor, x_compute: Tensor, policy: PrecisionPolicy) -> Tensor:
    """
    PRIVATE METHOD:
    Evaluate f at compute precision and return the value at accumulate precision...
    """
    return P.cast(f.eval(P.cast(state, policy.compute), x_compute), policy.accumulate)


def _check_finite(solver: str, step: int, residual: float, candidate: Tensor, last_state):
    if not (candidate.is_finite() and np.isfinite(residual)) or residual > DIVERGENCE_THRESHOLD:
        logger.warning("%s solver diverged at step %d (residual %r)", solver, step, residual)
        raise DivergenceError(step, residual, last_state)


def _single_state_iterate(
    solver: str, f: EquilibriumFunction, x: Tensor, cfg: SolverConfig, beta: Optional[float]
) -> SolveResult:
    """
    PRIVATE METHOD:
    The naive (beta is None) and relaxed iterations share everything but the update rule...
    """
    policy = cfg.precision_policy
    x_compute = P.cast(x, policy.compute)
    z = _initial_state(f, x, policy)
    residual = float("inf")
    steps = 0

    for n in range(cfg.max_steps):
        value = _evaluate(f, z, x_compute, policy)
        if beta is None:
            z_next = value
        else:
            z_next = P.add(P.scale(z, 1.0 - beta), P.scale(value, beta))

        residual = _max_abs_diff(z_next, z)
        _check_finite(solver, n + 1, residual, z_next, z)
        z = z_next
        steps = n + 1
        logger.debug("%s step %d residual %r", solver, steps, residual)

        if cfg.stop_rule == "residual" and residual < cfg.tol:
            break

    return SolveResult(z, residual, steps, steps, residual < cfg.tol, solver, 1.0 if beta is None else beta)


def naive_iterate(f: EquilibriumFunction, x: Tensor, cfg: SolverConfig = SolverConfig()) -> SolveResult:
    """
    Iterate z_{n+1} = f(z_n, x) from z_0 = 0 until |z_{n+1} - z_n|_max < tol or max_steps is reached.

    :param f: The equilibrium function.
    :param x: The input.
    :param cfg: Solver settings, beta is ignored.
    :return: A SolveResult whose state is the terminal z.
    """
    cfg.validate(reversible=False)
    return _single_state_iterate("naive", f, x, cfg, None)


def relaxed_iterate(f: EquilibriumFunction, x: Tensor, cfg: SolverConfig = SolverConfig()) -> SolveResult:
    """
    Iterate the damped update z_{n+1} = (1 - beta) z_n + beta f(z_n, x) from z_0 = 0. beta = 1 is the naive
    iteration.
    """
    cfg.validate(reversible=False)
    return _single_state_iterate("relaxed", f, x, cfg, cfg.beta)


def reversible_step(
    f: EquilibriumFunction,
    x_compute: Tensor,
    y: Tensor,
    z: Tensor,
    beta: float,
    policy: PrecisionPolicy = PrecisionPolicy(),
) -> Tuple[Tensor, Tensor]:
    """
    One forward step of the coupled scheme. The second update evaluates f at the already updated y.

    :param f: The equilibrium function.
    :param x_compute: The input, already at compute precision.
    :param y: y_n at accumulate precision.
    :param z: z_n at accumulate precision.
    :param beta: The relaxation parameter.
    :param policy: Where to evaluate f and where to accumulate.
    :return: (y_{n+1}, z_{n+1})
    """
    one_minus = 1.0 - beta
    y_next = P.add(P.scale(y, one_minus), P.scale(_evaluate(f, z, x_compute, policy), beta))
    z_next = P.add(P.scale(z, one_minus), P.scale(_evaluate(f, y_next, x_compute, policy), beta))
    return y_next, z_next


def iterate_reversible(
    f: EquilibriumFunction,
    x: Tensor,
    beta: float,
    policy: PrecisionPolicy = PrecisionPolicy(),
    max_steps: Optional[int] = None,
) -> Iterator[ReversibleState]:
    """
    Yield the states of the coupled iteration, starting with the zero state at step 0. Performs no stopping or
    divergence checks, the lab uses it to measure trajectories...
    """
    x_compute = P.cast(x, policy.compute)
    y = _initial_state(f, x, policy)
    z = _initial_state(f, x, policy)
    step = 0
    yield ReversibleState(y, z, step)

    while max_steps is None or step < max_steps:
        y, z = reversible_step(f, x_compute, y, z, beta, policy)
        step += 1
        yield ReversibleState(y, z, step)


def reversible_forward(f: EquilibriumFunction, x: Tensor, cfg: SolverConfig = SolverConfig()) -> SolveResult:
    """
    Run the reversible coupled solver. The residual is max(|y_{n+1} - y_n|_max, |z_{n+1} - z_n|_max). With the
    "residual" stop rule the realized number of steps is recorded in the result, the backward pass replays exactly
    that many.

    :param f: The equilibrium function.
    :param x: The input.
    :param cfg: Solver settings, validated including the |1 - beta| floor.
    :return: A SolveResult whose state is the terminal ReversibleState, nfe = 2 * steps_taken.
    """
    cfg.validate(reversible=True)
    residual = float("inf")
    previous = None
    state = None

    for state in iterate_reversible(f, x, cfg.beta, cfg.precision_policy, cfg.max_steps):
        if previous is not None:
            residual = max(_max_abs_diff(state.y, previous.y), _max_abs_diff(state.z, previous.z))
            _check_finite("reversible", state.step, residual, state.z, previous)
            if not state.y.is_finite():
                _check_finite("reversible", state.step, float("inf"), state.y, previous)
            logger.debug("reversible step %d residual %r", state.step, residual)
            if cfg.stop_rule == "residual" and residual < cfg.tol:
                break
        previous = state

    return SolveResult(state, residual, state.step, 2 * state.step, residual < cfg.tol, "reversible", cfg.beta)


def reverse_step(
    f: EquilibriumFunction,
    x_compute: Tensor,
    y_next: Tensor,
    z_next: Tensor,
    beta: float,
    policy: PrecisionPolicy = PrecisionPolicy(),
) -> Tuple[Tensor, Tensor, Linearization, Linearization]:
    """
    Invert one reversible step, keeping the two evaluations of f as linearizations so a backward pass can reuse
    them for its vector-Jacobian products.

    :return: (y_n, z_n, linearization of f at y_{n+1}, linearization of f at z_n)
    """
    one_minus = 1.0 - beta
    if abs(one_minus) < BETA_FLOOR:
        raise ConfigError("beta", f"cannot reverse a step with |1 - beta| below {BETA_FLOOR} (beta = {beta!r})")

    at_y = f.linearize(P.cast(y_next, policy.compute), x_compute)
    z = P.divide(P.subtract(z_next, P.scale(P.cast(at_y.output, policy.accumulate), beta)), one_minus)
    at_z = f.linearize(P.cast(z, policy.compute), x_compute)
    y = P.divide(P.subtract(y_next, P.scale(P.cast(at_z.output, policy.accumulate), beta)), one_minus)
    return y, z, at_y, at_z


def reversible_backward_step(
    f: EquilibriumFunction,
    x: Tensor,
    state_next: ReversibleState,
    beta: float,
    policy: PrecisionPolicy = PrecisionPolicy(),
) -> ReversibleState:
    """
    Recover (y_n, z_n) from (y_{n+1}, z_{n+1}). At infinite precision this is the exact inverse of
    reversible_step; in floating point the division by 1 - beta amplifies the rounding of the forward addition.

    :param f: The function used by the forward step.
    :param x: The input used by the forward step.
    :param state_next: The state after the forward step.
    :param beta: The relaxation parameter of the forward step.
    :param policy: The precision policy of the forward step.
    :return: The state before the forward step.
    """
    y, z, __, __ = reverse_step(f, P.cast(x, policy.compute), state_next.y, state_next.z, beta, policy)
    return ReversibleState(y, z, state_next.step - 1)


def _check_rate_domain(k: float):
    if not 0 <= k < 1:
        raise DomainError(f"Contraction constant k must lie in [0, 1), got {k!r}")


def rate_constant(beta: float, k: float) -> float:
    """
    The proven per-step contraction factor L = |1 - beta| + beta k of the coupled (and the relaxed) iteration.
    """
    _check_rate_domain(k)
    if not beta > 0:
        raise DomainError(f"beta must be positive, got {beta!r}")
    return abs(1 - beta) + beta * k


def coupled_rate_constants(beta: float, k: float) -> Tuple[float, float]:
    """
    Contraction constants of the two coupled updates, (L1, L2) with L1 = |1 - beta| + beta k bounding the y update
    and L2 = |1 - beta| + beta k |1 - beta| + beta^2 k^2 bounding the z update. L1 > L2 for every admissible
    beta != 1 when k > 0.
    """
    first = rate_constant(beta, k)
    second = abs(1 - beta) + beta * k * abs(1 - beta) + beta * beta * k * k
    return first, second


def beta_upper_bound(k: float) -> float:
    """
    The largest relaxation parameter for which the coupled iteration is guaranteed to converge, 2 / (k + 1).
    """
    _check_rate_domain(k)
    return 2.0 / (k + 1.0)
