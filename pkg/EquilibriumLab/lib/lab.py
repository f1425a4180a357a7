"""
Lab Package:
Experiment procedures producing table rows: convergence sweeps of the coupled solver, round trip reconstruction
benchmarks, gradient accuracy studies against the unrolled oracle, and function evaluation sweeps of training
runs. Every procedure is deterministic given its ExperimentSpec. Grid points are independent jobs which may run on
a thread pool, rows are returned in grid order...
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from itertools import product
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from EquilibriumLab.lib.cell_util import make_input
from EquilibriumLab.lib.equilibrium import (
    EquilibriumFunction,
    make_diagonal_cell,
    make_linear_cell,
    make_mlp_cell,
)
from EquilibriumLab.lib.errors import ConfigError, DivergenceError, ReconstructionError
from EquilibriumLab.lib.gradients import (
    get_engine,
    ift_gradient,
    jfb_gradient,
    relative_error,
    reversible_backprop,
    unrolled_gradient,
)
from EquilibriumLab.lib.model import evaluate
from EquilibriumLab.lib.solvers import (
    DIVERGENCE_THRESHOLD,
    SolverConfig,
    beta_upper_bound,
    iterate_reversible,
    rate_constant,
    reversible_backward_step,
    reversible_forward,
)
from EquilibriumLab.lib.tensor import PrecisionPolicy, Tensor
from EquilibriumLab.lib.training import TrainTask, train

logger = logging.getLogger(__name__)

EXPERIMENTS = ("sweep", "reconstruct", "accuracy", "nfe")
CELL_KINDS = ("mlp", "linear")

# Step count of the unrolled oracle in gradient accuracy studies.
ORACLE_STEPS = 256
# Hard cap on the horizon of a single convergence sweep row.
MAX_SWEEP_STEPS = 100000

SWEEP_COLUMNS = (
    "k",
    "beta",
    "L_predicted",
    "L_measured",
    "L_relaxed",
    "steps_to_tol",
    "converged",
    "within_bound",
)
RECONSTRUCT_COLUMNS = ("policy", "beta", "N", "k", "max_roundtrip_error")
ACCURACY_COLUMNS = ("engine", "k", "beta", "N", "m", "error_vs_oracle", "error_vs_same_steps", "nfe")
NFE_COLUMNS = ("N", "nfe", "final_loss")


def parse_grid(text: str, key: str = "grid", integer: bool = False) -> Tuple:
    """
    Parse a grid: "a:b:s" is the inclusive range a, a + s, ... <= b, "a,b,c" a list, and a single number itself.
    Values of ranges are rounded to 10 decimals so 0.1 steps read back as written.

    :raises ConfigError: For malformed text, a non-positive step or an empty grid.
    """
    try:
        if ":" in text:
            start, stop, step = (float(part) for part in text.split(":"))
            if not step > 0:
                raise ConfigError(key, f"grid step must be positive, got {step!r}")
            count = int(math.floor((stop - start) / step + 1e-9)) + 1
            values = [round(start + i * step, 10) for i in range(max(count, 0))]
        else:
            values = [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(key, f"expected 'start:stop:step' or a comma separated list, got {text!r}")

    if not values:
        raise ConfigError(key, f"grid {text!r} is empty")
    if integer:
        if any(value != int(value) for value in values):
            raise ConfigError(key, f"grid {text!r} must contain integers")
        return tuple(int(value) for value in values)
    return tuple(values)


@dataclass(frozen=True)
class ExperimentSpec:
    """
    The grids and settings of one lab experiment.
    """

    kind: str = "sweep"
    betas: Tuple[float, ...] = (0.5, 0.8, 0.9)
    ks: Tuple[float, ...] = (0.5,)
    steps: Tuple[int, ...] = (4,)
    adjoint_steps: Tuple[int, ...] = (1, 2, 4, 8, 16)
    policies: Tuple[str, ...] = ("double",)
    seeds: Tuple[int, ...] = (0, 1, 2)
    cell: str = "mlp"
    width: int = 8
    hidden: int = 16
    tol: float = 1e-6
    jobs: int = 1

    def validate(self) -> "ExperimentSpec":
        if self.kind not in EXPERIMENTS:
            raise ConfigError("kind", f"must be one of {list(EXPERIMENTS)}, got {self.kind!r}")
        for key in ("betas", "ks", "steps", "policies", "seeds"):
            if not getattr(self, key):
                raise ConfigError(key, "grid must not be empty")
        if self.kind == "accuracy" and not self.adjoint_steps:
            raise ConfigError("adjoint_steps", "grid must not be empty")
        if self.cell not in CELL_KINDS:
            raise ConfigError("cell", f"must be one of {list(CELL_KINDS)}, got {self.cell!r}")
        for k in self.ks:
            if not 0 <= k < 1:
                raise ConfigError("ks", f"every k must lie in [0, 1), got {k!r}")
        for policy in self.policies:
            PrecisionPolicy.parse(policy)
        if self.jobs < 1:
            raise ConfigError("jobs", f"must be positive, got {self.jobs!r}")
        for steps in tuple(self.steps) + tuple(self.adjoint_steps):
            if steps < 0:
                raise ConfigError("steps", f"step counts must be non-negative, got {steps!r}")

        # Every engine except the sweep runs the solver backwards.
        reversible = self.kind in ("reconstruct", "accuracy")
        for beta in self.betas:
            SolverConfig(beta=beta, tol=self.tol).validate(reversible=reversible)
        return self


def run_jobs(func: Callable[[Any], Any], items: Iterable[Any], jobs: int = 1) -> List[Any]:
    """
    Apply func to every item, on a pool of jobs threads when jobs > 1. Results keep the order of items.
    """
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(func, items))


def _median(values: Sequence[float]) -> float:
    return float(np.median(np.asarray(values, dtype=np.float64)))


def make_cell(kind: str, k: float, width: int, hidden: int, seed: int) -> EquilibriumFunction:
    """
    A random cell with Lipschitz constant k: an MlpCell, or a LinearCell with a gaussian matrix rescaled to k.
    """
    if kind == "mlp":
        return make_mlp_cell(width, hidden, k, seed)
    rng = np.random.default_rng(seed)
    return make_linear_cell(rng.standard_normal((width, width)), rng.standard_normal(width), target_k=k)


def _error_ratio_rate(errors: Sequence[float], floor: float) -> float:
    """
    PRIVATE METHOD:
    Geometric mean of successive error ratios e_n / e_{n-1}, n >= 2, over the errors still above floor...
    """
    usable = [e for e in errors[1:] if e > floor]
    if len(usable) < 2:
        return 0.0
    return (usable[-1] / usable[0]) ** (1.0 / (len(usable) - 1))


def _sweep_horizon(rate: float, initial_error: float, tol: float, minimum: int) -> int:
    if not rate < 1 or initial_error <= 0:
        return minimum
    needed = math.ceil(math.log(tol / (2.0 * initial_error)) / math.log(rate)) + 2 if rate > 0 else 2
    return min(max(minimum, needed), MAX_SWEEP_STEPS)


def _sweep_row(point: Tuple[float, float, ExperimentSpec]) -> Dict[str, Any]:
    k, beta, spec = point
    f = make_diagonal_cell(k, width=2)
    x = f.zero_input()
    q = f.fixed_point(x)
    predicted = rate_constant(beta, k)
    initial_error = float(np.max(np.abs(q)))
    horizon = _sweep_horizon(predicted, initial_error, spec.tol, max(spec.steps))
    floor = 1e-13 * (1.0 + initial_error)

    errors = []
    steps_to_tol = None
    previous = None
    for state in iterate_reversible(f, x, beta, max_steps=horizon):
        y, z = state.y.numpy(), state.z.numpy()
        error = max(float(np.max(np.abs(y - q))), float(np.max(np.abs(z - q))))
        if not np.isfinite(error) or error > DIVERGENCE_THRESHOLD:
            logger.warning("Sweep k=%r beta=%r diverged at step %d", k, beta, state.step)
            errors.append(float("inf"))
            break
        errors.append(error)
        if previous is not None and steps_to_tol is None:
            residual = max(float(np.max(np.abs(y - previous[0]))), float(np.max(np.abs(z - previous[1]))))
            if residual < spec.tol:
                steps_to_tol = state.step
                if state.step >= max(spec.steps):
                    break
        previous = (y, z)

    # Single state relaxed iteration on the same cell, for comparison.
    relaxed_errors = []
    z = np.zeros(2)
    for __ in range(min(horizon, len(errors) + 1)):
        relaxed_errors.append(float(np.max(np.abs(z - q))))
        z = (1 - beta) * z + beta * f.eval(Tensor(z), x).numpy()
        if not np.all(np.isfinite(z)):
            break

    diverged = not np.isfinite(errors[-1])
    return {
        "k": k,
        "beta": beta,
        "L_predicted": predicted,
        "L_measured": float("inf") if diverged else _error_ratio_rate(errors, floor),
        "L_relaxed": _error_ratio_rate(relaxed_errors, floor),
        "steps_to_tol": steps_to_tol,
        "converged": steps_to_tol is not None and not diverged,
        "within_bound": beta < beta_upper_bound(k),
    }


def convergence_sweep(spec: ExperimentSpec) -> List[Dict[str, Any]]:
    """
    Measure the per-step contraction of the coupled solver on diagonal LinearCells with exact constant k, for
    every (k, beta) of the grids. Each row is run long enough for the proven rate to reach the tolerance, at
    least max(spec.steps) steps. Divergent runs are rows too.

    :return: Rows with columns SWEEP_COLUMNS, ordered k-major.
    """
    spec.validate()
    points = [(k, beta, spec) for k, beta in product(spec.ks, spec.betas)]
    return run_jobs(_sweep_row, points, spec.jobs)


def roundtrip_error(f: EquilibriumFunction, x: Tensor, beta: float, steps: int, policy: PrecisionPolicy) -> float:
    """
    Run steps forward steps of the coupled solver, reverse all of them, and return the largest coordinate error of
    any reconstructed state against the stored forward trajectory.
    """
    trajectory = list(iterate_reversible(f, x, beta, policy, steps))
    state = trajectory[-1]
    worst = 0.0

    for expected in reversed(trajectory[:-1]):
        state = reversible_backward_step(f, x, state, beta, policy)
        for got, want in ((state.y, expected.y), (state.z, expected.z)):
            diff = np.abs(got.numpy().astype(np.float64) - want.numpy().astype(np.float64))
            if not np.all(np.isfinite(diff)):
                return float("inf")
            worst = max(worst, float(np.max(diff)) if diff.size else 0.0)

    return worst


def _reconstruct_row(point) -> Dict[str, Any]:
    policy_name, beta, steps, k, spec = point
    policy = PrecisionPolicy.parse(policy_name)
    errors = []
    for seed in spec.seeds:
        f = make_cell(spec.cell, k, spec.width, spec.hidden, seed)
        with np.errstate(over="ignore", invalid="ignore"):
            errors.append(roundtrip_error(f, make_input(f, seed), beta, steps, policy))
    return {"policy": policy.name, "beta": beta, "N": steps, "k": k, "max_roundtrip_error": _median(errors)}


def reconstruction_bench(spec: ExperimentSpec) -> List[Dict[str, Any]]:
    """
    Round trip reconstruction error for every (policy, beta, N, k), median over spec.seeds.

    :return: Rows with columns RECONSTRUCT_COLUMNS.
    """
    spec.validate()
    points = [(p, b, n, k, spec) for p, b, n, k in product(spec.policies, spec.betas, spec.steps, spec.ks)]
    return run_jobs(_reconstruct_row, points, spec.jobs)


def _accuracy_rows(point) -> List[Dict[str, Any]]:
    k, beta, spec = point
    per_seed: Dict[Tuple[str, int, Optional[int]], List[Tuple[float, float, int]]] = {}

    for seed in spec.seeds:
        f = make_cell(spec.cell, k, spec.width, spec.hidden, seed)
        x = make_input(f, seed)
        cotangent = Tensor(np.ones(f.width))
        base = SolverConfig(beta=beta, tol=spec.tol, stop_rule="fixed_steps")

        oracle_cfg = base.replace(max_steps=ORACLE_STEPS)
        oracle = unrolled_gradient(f, x, oracle_cfg, cotangent).flat()
        z_star = reversible_forward(f, x, oracle_cfg).z

        for steps in spec.steps:
            cfg = base.replace(max_steps=steps)
            same = unrolled_gradient(f, x, cfg, cotangent).flat()
            result = reversible_forward(f, x, cfg)
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    grad = reversible_backprop(f, x, result, cotangent, cfg).flat()
                errors = (relative_error(grad, oracle), relative_error(grad, same))
            except ReconstructionError:
                errors = (float("nan"), float("nan"))
            per_seed.setdefault(("reversible", steps, None), []).append(errors + (result.nfe + 2 * steps,))

        for m in spec.adjoint_steps:
            adjoint = SolverConfig(beta=1.0, tol=spec.tol, max_steps=m, stop_rule="fixed_steps")
            try:
                grad = ift_gradient(f, x, z_star, cotangent, adjoint).flat()
                error = relative_error(grad, oracle)
            except DivergenceError:
                error = float("nan")
            per_seed.setdefault(("ift", ORACLE_STEPS, m), []).append((error, float("nan"), 2 * ORACLE_STEPS + m + 1))

        grad = jfb_gradient(f, x, z_star, cotangent).flat()
        per_seed.setdefault(("jfb", ORACLE_STEPS, 0), []).append(
            (relative_error(grad, oracle), float("nan"), 2 * ORACLE_STEPS + 1)
        )

    rows = []
    for (engine, steps, m), values in per_seed.items():
        rows.append(
            {
                "engine": engine,
                "k": k,
                "beta": beta,
                "N": steps,
                "m": m,
                "error_vs_oracle": _median([v[0] for v in values]),
                "error_vs_same_steps": _median([v[1] for v in values]),
                "nfe": values[0][2],
            }
        )
    return rows


def gradient_accuracy_bench(spec: ExperimentSpec) -> List[Dict[str, Any]]:
    """
    Gradient error of each engine against the unrolled gradient at ORACLE_STEPS steps, for every (k, beta): the
    reversible engine over the N grid (also against the unrolled gradient at the same N), the implicit engine
    over the adjoint step grid at the oracle's terminal state, and the Jacobian-free engine once. Errors are
    medians over seeds. The loss is the sum of the terminal state.

    :return: Rows with columns ACCURACY_COLUMNS.
    """
    spec.validate()
    points = [(k, beta, spec) for k, beta in product(spec.ks, spec.betas)]
    return [row for rows in run_jobs(_accuracy_rows, points, spec.jobs) for row in rows]


def nfe_sweep(
    task: TrainTask,
    steps_grid: Sequence[int],
    seeds: Sequence[int] = (0, 1, 2),
    engine: str = "reversible",
    cfg: SolverConfig = SolverConfig(stop_rule="fixed_steps"),
    jobs: int = 1,
) -> List[Dict[str, Any]]:
    """
    Train one model per (N, seed) with the solver fixed to N steps and report the median final loss over the whole
    dataset. nfe is the forward cost of one solve, 2 N.

    :return: Rows with columns NFE_COLUMNS, one per N.
    """
    if not steps_grid:
        raise ConfigError("steps", "grid must not be empty")

    def run(point: Tuple[int, int]) -> float:
        steps, seed = point
        seeded = replace(task, seed=seed)
        solver = cfg.replace(max_steps=steps, stop_rule="fixed_steps")
        result = train(seeded, engine, solver)
        return evaluate(result.state.model, seeded.make_dataset(), get_engine(engine), solver).loss

    points = list(product(steps_grid, seeds))
    losses = run_jobs(run, points, jobs)
    rows = []
    for steps in steps_grid:
        values = [loss for (n, __), loss in zip(points, losses) if n == steps]
        rows.append({"N": steps, "nfe": 2 * steps, "final_loss": _median(values)})
        logger.info("nfe sweep N=%d median final loss %r", steps, rows[-1]["final_loss"])
    return rows


def run_experiment(spec: ExperimentSpec) -> List[Dict[str, Any]]:
    """
    Run the sweep, reconstruct or accuracy experiment named by spec.kind.
    """
    runners = {"sweep": convergence_sweep, "reconstruct": reconstruction_bench, "accuracy": gradient_accuracy_bench}
    if spec.kind not in runners:
        raise ConfigError("kind", f"must be one of {list(runners)}, got {spec.kind!r}")
    return runners[spec.kind](spec)
