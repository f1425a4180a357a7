"""
Gradients Package:
Gradient engines for equilibrium layers. The reversible engine replays the forward solver backwards, reconstructing
every state in closed form, and so needs memory independent of the number of steps. The unrolled engine stores
the whole forward graph on a tape and serves as the oracle. The implicit (IFT) engine solves the adjoint fixed
point system at the terminal state, and the Jacobian-free engine truncates that system after its first term...

Every engine produces a GradientReport. Engines are looked up by identifier through get_gradient_engines(), in the
same way new engines are picked up automatically when they subclass GradientEngine.
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Tuple, Type

import numpy as np

from EquilibriumLab.lib import primitives as P
from EquilibriumLab.lib.equilibrium import EquilibriumFunction, flatten_parameters, unflatten_parameters
from EquilibriumLab.lib.errors import ConfigError, DivergenceError, ReconstructionError, ShapeError
from EquilibriumLab.lib.solvers import (
    BETA_FLOOR,
    DIVERGENCE_THRESHOLD,
    SolveResult,
    SolverConfig,
    relaxed_iterate,
    reverse_step,
    reversible_forward,
)
from EquilibriumLab.lib.tape import DEFAULT_FD_EPS, Tape, finite_diff_grad, vjp
from EquilibriumLab.lib.tensor import Tensor

logger = logging.getLogger(__name__)

ENGINES = ("reversible", "unrolled", "ift", "jfb")

# Step cap of the implicit engine's adjoint iteration when no adjoint config is given.
ADJOINT_MAX_STEPS = 256


class Adjoints(NamedTuple):
    """
    Cotangents of the coupled state (y_n, z_n) and the parameter cotangent accumulated so far.
    """

    y_bar: Tensor
    z_bar: Tensor
    theta_bar: Dict[str, Tensor]

    @classmethod
    def initial(
        cls, f: EquilibriumFunction, loss_cotangent: Tensor, y_cotangent: Optional[Tensor] = None
    ) -> "Adjoints":
        """
        z_bar = dL/dz_N, y_bar = dL/dy_N (zero unless given) and theta_bar = 0.
        """
        y_bar = Tensor.zeros_like(loss_cotangent) if y_cotangent is None else y_cotangent
        if y_bar.shape != loss_cotangent.shape:
            raise ShapeError("Adjoints", loss_cotangent.shape, y_bar.shape)
        theta_bar = {name: Tensor(np.zeros(param.shape)) for name, param in f.parameters.items()}
        return cls(y_bar, loss_cotangent, theta_bar)


@dataclass(frozen=True)
class GradientReport:
    """
    The gradient of a loss on the terminal state w.r.t. the parameters (and the input) of f, with the cost of
    computing it. nfe_forward counts f evaluations of the forward solve, nfe_backward the f evaluations or
    vector-Jacobian products of the backward pass. peak_stored_tensors is the largest number of tensors the
    engine kept alive at once.
    """

    theta_grad: Dict[str, Tensor]
    x_grad: Optional[Tensor]
    engine: str
    nfe_forward: int
    nfe_backward: int
    peak_stored_tensors: int

    def flat(self) -> np.ndarray:
        return flatten_parameters(self.theta_grad)


def relative_error(value: np.ndarray, reference: np.ndarray) -> float:
    """
    Largest coordinatewise absolute difference, normalised by the infinity norm of the reference. A zero reference
    leaves the difference unnormalised.
    """
    value = np.asarray(value, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if value.size == 0:
        return 0.0
    scale = float(np.max(np.abs(reference)))
    return float(np.max(np.abs(value - reference))) / (scale if scale > 0 else 1.0)


def _accumulate(total: Dict[str, Tensor], part: Dict[str, Tensor]) -> Dict[str, Tensor]:
    return {name: Tensor(total[name].numpy() + part[name].numpy().astype(np.float64)) for name in total}


def _replayed(cfg: SolverConfig, result: SolveResult) -> SolverConfig:
    """
    PRIVATE METHOD:
    The config that reproduces the realized forward trajectory: exactly result.steps_taken steps, no early stop...
    """
    return cfg.replace(max_steps=result.steps_taken, stop_rule="fixed_steps")


def forward_solve(f: EquilibriumFunction, x: Tensor, cfg: SolverConfig) -> SolveResult:
    """
    The forward solver used by the engines that do not reverse it: the reversible solver whenever beta admits it,
    otherwise the relaxed iteration (beta = 1 gives the naive iteration).
    """
    if abs(1 - cfg.beta) >= BETA_FLOOR:
        return reversible_forward(f, x, cfg)
    return relaxed_iterate(f, x, cfg)


def reversible_backprop(
    f: EquilibriumFunction,
    x: Tensor,
    result: SolveResult,
    loss_cotangent: Tensor,
    cfg: SolverConfig,
    y_cotangent: Optional[Tensor] = None,
) -> GradientReport:
    """
    Backpropagate through a reversible solve without storing its trajectory. Each backward step reconstructs the
    previous state from the current one, then applies the adjoint updates in the order: pull beta z_bar back
    through f at y_{n+1} into y_bar, damp y_bar, pull beta y_bar back through f at z_n into z_bar. Both pullbacks
    reuse the evaluations made by the reconstruction, so the backward pass costs 2 N evaluations of f.

    :param f: The equilibrium function of the forward solve.
    :param x: The input of the forward solve.
    :param result: The result of reversible_forward(f, x, cfg).
    :param loss_cotangent: dL/dz_N, shaped like z_N.
    :param cfg: The config of the forward solve.
    :param y_cotangent: dL/dy_N, zero if None.
    :return: A GradientReport with theta_grad and x_grad.
    """
    cfg.validate(reversible=True)
    if result.y is None:
        raise ConfigError("result", "reversible backpropagation needs the result of the reversible solver")
    if loss_cotangent.shape != result.z.shape:
        raise ShapeError("reversible_backprop", result.z.shape, loss_cotangent.shape)

    policy = cfg.precision_policy
    beta = cfg.beta
    one_minus = 1.0 - beta
    x_compute = P.cast(x, policy.compute)
    acc = policy.accumulate.dtype

    adjoints = Adjoints.initial(f, P.cast(loss_cotangent, policy.accumulate), y_cotangent)
    y_bar = adjoints.y_bar.numpy().astype(acc)
    z_bar = adjoints.z_bar.numpy().astype(acc)
    theta_bar = adjoints.theta_bar
    x_bar = np.zeros(x.shape)

    y, z = result.state.y, result.state.z
    # y, z, their adjoints and x stay alive throughout.
    resident = 5 + len(theta_bar)
    peak = resident

    for step in range(result.steps_taken, 0, -1):
        y_prev, z_prev, at_y, at_z = reverse_step(f, x_compute, y, z, beta, policy)
        if not (y_prev.is_finite() and z_prev.is_finite()):
            logger.warning("Reconstruction failed at step %d", step)
            raise ReconstructionError(step)

        # z_{n+1} = (1 - beta) z_n + beta f(y_{n+1})
        through_y = at_y.pullback(Tensor.wrap(beta * z_bar))
        y_bar = y_bar + through_y.z.numpy().astype(acc)
        theta_bar = _accumulate(theta_bar, through_y.theta)
        x_bar = x_bar + through_y.x.numpy()

        # y_{n+1} = (1 - beta) y_n + beta f(z_n)
        through_z = at_z.pullback(Tensor.wrap(beta * y_bar))
        y_bar = one_minus * y_bar
        z_bar = one_minus * z_bar + through_z.z.numpy().astype(acc)
        theta_bar = _accumulate(theta_bar, through_z.theta)
        x_bar = x_bar + through_z.x.numpy()

        peak = max(peak, resident + at_y.stored_tensors() + at_z.stored_tensors())
        y, z = y_prev, z_prev

    logger.debug("reversible backprop over %d steps, peak %d stored tensors", result.steps_taken, peak)
    return GradientReport(
        theta_bar, Tensor(x_bar, x.precision), "reversible", result.nfe, 2 * result.steps_taken, peak
    )


def _terminal_loss(z: Tensor, loss_cotangent: Tensor, y: Optional[Tensor], y_cotangent: Optional[Tensor]) -> Tensor:
    loss = P.total(P.multiply(z, Tensor(loss_cotangent.numpy(), z.precision)))
    if y is not None and y_cotangent is not None:
        loss = P.add(loss, P.total(P.multiply(y, Tensor(y_cotangent.numpy(), y.precision))))
    return loss


def unrolled_gradient(
    f: EquilibriumFunction,
    x: Tensor,
    cfg: SolverConfig,
    loss_cotangent: Tensor,
    y_cotangent: Optional[Tensor] = None,
) -> GradientReport:
    """
    Record the whole reversible solve on a tape and replay it in reverse. Exact for the finite graph, with memory
    growing linearly in the number of steps.
    """
    parameters = f.parameters

    with Tape() as tape:
        tape.watch(x, *parameters.values())
        result = reversible_forward(f, x, cfg)
        if loss_cotangent.shape != result.z.shape:
            raise ShapeError("unrolled_gradient", result.z.shape, loss_cotangent.shape)
        loss = _terminal_loss(result.z, loss_cotangent, result.y, y_cotangent)

    grads = vjp(tape, Tensor(1.0, loss.precision), loss)
    theta_grad = {name: Tensor(grads[param].numpy()) for name, param in parameters.items()}
    logger.debug("unrolled gradient over %d steps, %d stored tensors", result.steps_taken, tape.stored_tensors())
    return GradientReport(theta_grad, Tensor(grads[x].numpy()), "unrolled", result.nfe, 0, tape.stored_tensors())


def ift_gradient(
    f: EquilibriumFunction,
    x: Tensor,
    z_star: Tensor,
    loss_cotangent: Tensor,
    adjoint_cfg: SolverConfig = SolverConfig(beta=1.0, max_steps=64),
) -> GradientReport:
    """
    Implicit gradient at an (approximate) fixed point. Solves g = J^T g + a_z, J = df/dz at z_star, by the damped
    iteration g <- (1 - beta) g + beta (J^T g + a_z) from g_0 = a_z, then projects g onto the parameters and the
    input through one more pullback.

    :param f: The equilibrium function.
    :param x: The input.
    :param z_star: The approximate fixed point.
    :param loss_cotangent: a_z = dL/dz_star.
    :param adjoint_cfg: beta, tol, max_steps and stop_rule of the adjoint iteration. beta = 1 is admitted.
    :return: A GradientReport, nfe_backward counts the pullbacks made.
    """
    adjoint_cfg.validate(reversible=False)
    if loss_cotangent.shape != z_star.shape:
        raise ShapeError("ift_gradient", z_star.shape, loss_cotangent.shape)

    beta = adjoint_cfg.beta
    linearization = f.linearize(z_star, P.cast(x, z_star.precision))
    a_z = loss_cotangent.numpy().astype(np.float64)
    g = a_z
    pullbacks = 0

    for step in range(1, adjoint_cfg.max_steps + 1):
        jtg = linearization.pullback(Tensor(g, z_star.precision)).z.numpy().astype(np.float64)
        pullbacks += 1
        g_next = (1.0 - beta) * g + beta * (jtg + a_z)
        residual = float(np.max(np.abs(g_next - g))) if g.size else 0.0
        if not np.all(np.isfinite(g_next)) or residual > DIVERGENCE_THRESHOLD:
            logger.warning("Adjoint iteration diverged at step %d", step)
            raise DivergenceError(step, residual, Tensor(g))
        g = g_next
        if adjoint_cfg.stop_rule == "residual" and residual < adjoint_cfg.tol:
            break

    projection = linearization.pullback(Tensor(g, z_star.precision))
    theta_grad = {name: Tensor(value.numpy()) for name, value in projection.theta.items()}
    return GradientReport(
        theta_grad, Tensor(projection.x.numpy(), x.precision), "ift", 0, pullbacks + 1, linearization.stored_tensors()
    )


def jfb_gradient(f: EquilibriumFunction, x: Tensor, z_star: Tensor, loss_cotangent: Tensor) -> GradientReport:
    """
    Jacobian-free gradient: the implicit gradient with g = a_z. Cheap and biased.
    """
    if loss_cotangent.shape != z_star.shape:
        raise ShapeError("jfb_gradient", z_star.shape, loss_cotangent.shape)

    linearization = f.linearize(z_star, P.cast(x, z_star.precision))
    projection = linearization.pullback(loss_cotangent)
    theta_grad = {name: Tensor(value.numpy()) for name, value in projection.theta.items()}
    return GradientReport(
        theta_grad, Tensor(projection.x.numpy(), x.precision), "jfb", 0, 1, linearization.stored_tensors()
    )


class GradientEngine(ABC):
    """
    Abstract class for gradient engines. An engine is used in two phases, so the loss cotangent can depend on the
    forward solution: solve() runs the forward solver, backward() turns the result and dL/dz_N into a
    GradientReport.
    """

    __ERROR_MSG = "Subclass doesn't implement this method!!!"

    def __init__(self, adjoint_cfg: Optional[SolverConfig] = None):
        self._adjoint_cfg = adjoint_cfg

    @classmethod
    @abstractmethod
    def get_identifier(cls) -> str:
        """
        Get the name of this engine, as used by the command line and configuration files.
        """
        raise NotImplementedError(cls.__ERROR_MSG)

    def solve(self, f: EquilibriumFunction, x: Tensor, cfg: SolverConfig) -> SolveResult:
        return forward_solve(f, x, cfg)

    @abstractmethod
    def backward(
        self, f: EquilibriumFunction, x: Tensor, result: SolveResult, loss_cotangent: Tensor, cfg: SolverConfig
    ) -> GradientReport:
        """
        Compute the gradient of a loss whose cotangent w.r.t. the terminal state is loss_cotangent.

        :param f: The equilibrium function.
        :param x: The input.
        :param result: The result of self.solve(f, x, cfg).
        :param loss_cotangent: dL/dz_N.
        :param cfg: The config of the forward solve.
        :return: A GradientReport.
        """
        raise NotImplementedError(self.__ERROR_MSG)


class ReversibleEngine(GradientEngine):
    @classmethod
    def get_identifier(cls) -> str:
        return "reversible"

    def solve(self, f: EquilibriumFunction, x: Tensor, cfg: SolverConfig) -> SolveResult:
        return reversible_forward(f, x, cfg)

    def backward(self, f, x, result, loss_cotangent, cfg) -> GradientReport:
        return reversible_backprop(f, x, result, loss_cotangent, _replayed(cfg, result))


class UnrolledEngine(GradientEngine):
    """
    Re-runs the forward solve under a tape for exactly the realized number of steps.
    """

    @classmethod
    def get_identifier(cls) -> str:
        return "unrolled"

    def solve(self, f: EquilibriumFunction, x: Tensor, cfg: SolverConfig) -> SolveResult:
        return reversible_forward(f, x, cfg)

    def backward(self, f, x, result, loss_cotangent, cfg) -> GradientReport:
        return unrolled_gradient(f, x, _replayed(cfg, result), loss_cotangent)


def _with_forward_cost(report: GradientReport, result: SolveResult) -> GradientReport:
    return GradientReport(
        report.theta_grad,
        report.x_grad,
        report.engine,
        result.nfe,
        report.nfe_backward,
        report.peak_stored_tensors,
    )


def default_adjoint_config(cfg: SolverConfig) -> SolverConfig:
    """
    The adjoint iteration of the implicit engine when none is configured: the forward beta and tol, stopping on the
    residual, with a step cap of at least ADJOINT_MAX_STEPS.
    """
    return cfg.replace(max_steps=max(cfg.max_steps, ADJOINT_MAX_STEPS), stop_rule="residual")


class IftEngine(GradientEngine):
    """
    The adjoint iteration follows default_adjoint_config(cfg) unless an adjoint config is given.
    """

    @classmethod
    def get_identifier(cls) -> str:
        return "ift"

    def backward(self, f, x, result, loss_cotangent, cfg) -> GradientReport:
        adjoint_cfg = self._adjoint_cfg if self._adjoint_cfg is not None else default_adjoint_config(cfg)
        return _with_forward_cost(ift_gradient(f, x, result.z, loss_cotangent, adjoint_cfg), result)


class JfbEngine(GradientEngine):
    @classmethod
    def get_identifier(cls) -> str:
        return "jfb"

    def backward(self, f, x, result, loss_cotangent, cfg) -> GradientReport:
        return _with_forward_cost(jfb_gradient(f, x, result.z, loss_cotangent), result)


def get_gradient_engines() -> List[Type[GradientEngine]]:
    """
    Get every gradient engine class known to the library.
    """
    return GradientEngine.__subclasses__()


def get_engine(name: str, adjoint_cfg: Optional[SolverConfig] = None) -> GradientEngine:
    """
    Instantiate the gradient engine called name.

    :raises ConfigError: If no engine has that identifier.
    """
    for engine in get_gradient_engines():
        if engine.get_identifier() == name:
            return engine(adjoint_cfg)
    names = [engine.get_identifier() for engine in get_gradient_engines()]
    raise ConfigError("engine", f"must be one of {names}, got {name!r}")


def compute_gradient(
    engine: str,
    f: EquilibriumFunction,
    x: Tensor,
    cfg: SolverConfig,
    loss_cotangent: Tensor,
    adjoint_cfg: Optional[SolverConfig] = None,
) -> Tuple[SolveResult, GradientReport]:
    """
    Solve and differentiate a loss with a fixed cotangent on the terminal state, using the named engine.

    :return: The forward SolveResult and the GradientReport.
    """
    runner = get_engine(engine, adjoint_cfg)
    result = runner.solve(f, x, cfg)
    return result, runner.backward(f, x, result, loss_cotangent, cfg)


@dataclass(frozen=True)
class ParameterDiscrepancy:
    name: str
    max_abs: float
    max_relative: float


@dataclass(frozen=True)
class GradCheckReport:
    """
    Discrepancies between an engine's gradient and central finite differences of the solve-then-loss map.
    """

    engine: str
    parameters: Tuple[ParameterDiscrepancy, ...]
    max_abs: float
    max_relative: float
    engine_grad: np.ndarray
    fd_grad: np.ndarray


def grad_check(
    f: EquilibriumFunction,
    x: Tensor,
    cfg: SolverConfig,
    engine: str = "reversible",
    fd_eps: float = DEFAULT_FD_EPS,
    loss_cotangent: Optional[Tensor] = None,
    adjoint_cfg: Optional[SolverConfig] = None,
) -> GradCheckReport:
    """
    Compare an engine against finite differences for the loss L = <c, z_N>. The solve runs a fixed number of steps
    so perturbing the parameters never changes the graph being differentiated.

    :param f: The equilibrium function, at double precision.
    :param x: The input.
    :param cfg: Forward solver config, its stop rule is overridden to fixed_steps.
    :param engine: The engine to check.
    :param fd_eps: Finite difference step.
    :param loss_cotangent: c, all ones if None.
    :param adjoint_cfg: Adjoint config of the ift engine.
    :return: A GradCheckReport, discrepancies are data and never raise.
    """
    cfg = cfg.replace(stop_rule="fixed_steps")
    if loss_cotangent is None:
        loss_cotangent = Tensor(np.ones(x.shape[:-1] + (f.width,)))

    __, report = compute_gradient(engine, f, x, cfg, loss_cotangent, adjoint_cfg)
    like = f.parameters
    weights = loss_cotangent.numpy().astype(np.float64)

    def loss(flat: Tensor) -> float:
        perturbed = f.with_parameters(unflatten_parameters(flat.numpy(), like))
        return float(np.sum(weights * forward_solve(perturbed, x, cfg).z.numpy()))

    fd = finite_diff_grad(loss, Tensor(flatten_parameters(like)), fd_eps).numpy()
    analytic = report.flat()

    rows = []
    offset = 0
    for name, param in like.items():
        part = slice(offset, offset + param.size)
        offset += param.size
        rows.append(
            ParameterDiscrepancy(
                name,
                float(np.max(np.abs(analytic[part] - fd[part]))) if param.size else 0.0,
                relative_error(analytic[part], fd[part]),
            )
        )

    max_abs = float(np.max(np.abs(analytic - fd))) if fd.size else 0.0
    logger.info("grad-check %s: max abs %r, max relative %r", engine, max_abs, relative_error(analytic, fd))
    return GradCheckReport(engine, tuple(rows), max_abs, relative_error(analytic, fd), analytic, fd)
