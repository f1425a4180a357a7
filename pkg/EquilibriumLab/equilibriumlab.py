"""
The main entry package for running EquilibriumLab, provides the command line interface to the solvers, gradient
engines and lab experiments...

Exit codes: 0 on success, 1 on a configuration error, 2 when a solve diverges or fails to converge.
"""

import functools
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import click
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

# We try to import lib for EquilibriumLab, if it fails we attempt to add our parent's parent to the path and try
# again. This allows for execution via the command line.
try:
    from EquilibriumLab.lib import lab
except ImportError as exp:
    sys.path.append(str(Path(__file__).resolve().parent.parent))
    from EquilibriumLab.lib import lab

from EquilibriumLab.lib import checkpoint_format, results, run_config, training
from EquilibriumLab.lib.cell_util import make_input, parse_cell
from EquilibriumLab.lib.errors import ConfigError, DivergenceError, FormatError, ReconstructionError
from EquilibriumLab.lib.gradients import get_gradient_engines, grad_check
from EquilibriumLab.lib.solvers import SolverConfig, naive_iterate, relaxed_iterate, reversible_forward

logger = logging.getLogger("EquilibriumLab")

EXIT_CONFIG = 1
EXIT_NUMERICAL = 2

SOLVERS = {"reversible": reversible_forward, "relaxed": relaxed_iterate, "naive": naive_iterate}

# solve runs to the tolerance, so its step count is a cap rather than the fixed N of training and gradients.
SOLVE_DEFAULTS = run_config.RunConfig(solver=SolverConfig(max_steps=1000))


def _setup_logging(verbose: int):
    level = logging.WARNING if verbose == 0 else (logging.INFO if verbose == 1 else logging.DEBUG)
    logging.basicConfig(
        level=level,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=Console(stderr=True), show_path=False)],
        force=True,
    )


def _exit_codes(command):
    """
    Map library errors raised by a command onto the exit codes of the program.
    """

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except (ConfigError, FormatError, FileNotFoundError) as e:
            click.echo(f"Error: {e}", err=True)
            sys.exit(EXIT_CONFIG)
        except (DivergenceError, ReconstructionError) as e:
            click.echo(f"Diverged: {e}", err=True)
            sys.exit(EXIT_NUMERICAL)

    return wrapper


def _load(config_path: Optional[str], base: run_config.RunConfig = run_config.RunConfig(), **flags):
    """
    Load the run configuration (base if no file) and apply the command line flags, which win.

    :return: The RunConfig, not yet validated.
    """
    config = run_config.load_config(config_path, base) if config_path else base
    return run_config.apply_overrides(config, {run_config.FLAG_FIELDS[name]: value for name, value in flags.items()})


def _print_rows(title: str, rows: Sequence[Dict[str, Any]], columns: Sequence[str]):
    table = Table(title=title, show_header=True, header_style="bold magenta")
    for column in columns:
        table.add_column(column)
    for row in rows:
        table.add_row(*(results.format_value(row.get(column)) for column in columns))
    Console().print(table)


def _write_rows(out: Optional[str], rows: List[Dict[str, Any]], columns: Sequence[str]):
    if out:
        path = results.write_csv(out, rows, columns)
        click.echo(f"Wrote {len(rows)} rows to {path}")


config_option = click.option(
    "--config", "config_path", type=click.Path(dir_okay=False), default=None, help="JSON run configuration file."
)
out_option = click.option("--out", "out", type=click.Path(dir_okay=False), default=None, help="CSV output path.")
jobs_option = click.option("--jobs", "jobs", type=int, default=None, help="Number of parallel grid jobs.")


def solver_options(command):
    """
    The solver flags shared by the commands that run a solve.
    """
    options = [
        click.option("--beta", "beta", type=float, default=None, help="Relaxation parameter, 0 < beta < 2."),
        click.option("--tol", "tol", type=float, default=None, help="Residual tolerance."),
        click.option("--max-steps", "--steps", "max_steps", type=int, default=None, help="Solver step count N."),
        click.option("--precision", "precision", type=click.Choice(["double", "single", "mixed"]), default=None),
        click.option("--stop-rule", "stop_rule", type=click.Choice(["residual", "fixed_steps"]), default=None),
    ]
    for option in reversed(options):
        command = option(command)
    return command


def bench_options(command):
    """
    The grid flags shared by the lab experiments.
    """
    options = [
        click.option("--beta", "betas", default=None, help="Beta grid, 'a:b:s' or 'a,b,c'."),
        click.option("--k", "ks", default=None, help="Contraction constant grid."),
        click.option("--steps", "steps_grid", default=None, help="Step count grid N."),
        click.option("--seeds", "seeds", default=None, help="Seeds, medians are reported."),
        click.option("--bench-cell", "bench_cell", type=click.Choice(list(lab.CELL_KINDS)), default=None),
        config_option,
        out_option,
        jobs_option,
    ]
    for option in reversed(options):
        command = option(command)
    return command


@click.group()
@click.option("-v", "--verbose", count=True, help="Increase logging verbosity (-v info, -vv debug).")
def cli(verbose: int):
    """
    EquilibriumLab: reversible fixed point solvers and exact gradients for equilibrium layers.
    """
    _setup_logging(verbose)


@cli.command()
@config_option
@solver_options
@click.option("--cell", "cell", default=None, help="Cell: 'linear:K', 'diag:K[:WIDTH]' or 'mlp:W:H:K'.")
@click.option("--seed", "seed", type=int, default=None, help="Seed of random cells and inputs.")
@click.option("--solver", "solver", type=click.Choice(list(SOLVERS)), default=None, help="Forward solver.")
@out_option
@_exit_codes
def solve(config_path, beta, tol, max_steps, precision, stop_rule, cell, seed, solver, out):
    """
    Solve for the fixed point of a cell and print a summary.
    """
    config = _load(
        config_path,
        beta=beta,
        tol=tol,
        max_steps=max_steps,
        precision=precision,
        stop_rule=stop_rule,
        cell=cell,
        seed=seed,
        solver=solver,
        out=out,
        base=SOLVE_DEFAULTS,
    )
    solver = config.run.solver
    if solver not in SOLVERS:
        raise ConfigError("run.solver", f"must be one of {list(SOLVERS)}, got {solver!r}")
    config.solver.validate(reversible=solver == "reversible")
    f = parse_cell(config.run.cell, config.run.seed)
    x = make_input(f, config.run.seed)

    result = SOLVERS[solver](f, x, config.solver)
    z = result.z.numpy()
    row = {
        "solver": solver,
        "cell": config.run.cell,
        "beta": config.solver.beta,
        "steps_taken": result.steps_taken,
        "nfe": result.nfe,
        "residual": result.residual,
        "converged": result.converged,
        "z": " ".join(repr(float(v)) for v in z.ravel()),
    }

    table = Table(title="Solve Summary", show_header=False)
    for key, value in row.items():
        table.add_row(key, results.format_value(value))
    Console().print(table)
    _write_rows(config.run.out, [row], list(row))

    if not result.converged:
        click.echo(f"Did not converge: residual {result.residual!r} after {result.steps_taken} steps", err=True)
        sys.exit(EXIT_NUMERICAL)


@cli.command("grad-check")
@config_option
@solver_options
@click.option("--cell", "cell", default=None, help="Cell: 'linear:K', 'diag:K[:WIDTH]' or 'mlp:W:H:K'.")
@click.option("--seed", "seed", type=int, default=None)
@click.option(
    "--engine",
    "engine",
    type=click.Choice([engine.get_identifier() for engine in get_gradient_engines()]),
    default=None,
)
@click.option("--fd-eps", "fd_eps", type=float, default=None, help="Finite difference step.")
@click.option("--adjoint-steps", "adjoint_steps", type=int, default=None, help="Adjoint steps of the ift engine.")
@out_option
@_exit_codes
def grad_check_command(
    config_path, beta, tol, max_steps, precision, stop_rule, cell, seed, engine, fd_eps, adjoint_steps, out
):
    """
    Compare a gradient engine against central finite differences.
    """
    config = _load(
        config_path,
        beta=beta,
        tol=tol,
        max_steps=max_steps,
        precision=precision,
        stop_rule=stop_rule,
        cell=cell,
        seed=seed,
        engine=engine,
        fd_eps=fd_eps,
        adjoint_steps=adjoint_steps,
        out=out,
    )
    config.solver.validate(reversible=config.run.engine in ("reversible", "unrolled"))
    f = parse_cell(config.run.cell, config.run.seed)
    x = make_input(f, config.run.seed)

    adjoint_cfg = config.adjoint_config()
    report = grad_check(f, x, config.solver, config.run.engine, config.run.fd_eps, adjoint_cfg=adjoint_cfg)
    rows = [
        {"engine": report.engine, "parameter": p.name, "max_abs": p.max_abs, "max_relative": p.max_relative}
        for p in report.parameters
    ]
    columns = ("engine", "parameter", "max_abs", "max_relative")
    _print_rows("Gradient Check", rows, columns)
    click.echo(f"max relative discrepancy: {report.max_relative!r}")
    _write_rows(config.run.out, rows, columns)


def _run_bench(kind: str, columns: Sequence[str], title: str, config_path, **flags):
    config = _load(config_path, **flags)
    config.solver.validate(reversible=False)
    spec = config.spec(kind)
    rows = lab.run_experiment(spec)
    _print_rows(title, rows, columns)
    _write_rows(config.run.out, rows, columns)


@cli.command()
@bench_options
@_exit_codes
def sweep(betas, ks, steps_grid, seeds, bench_cell, config_path, out, jobs):
    """
    Measure the contraction rate of the coupled solver over a (k, beta) grid.
    """
    _run_bench(
        "sweep",
        lab.SWEEP_COLUMNS,
        "Convergence Sweep",
        config_path,
        betas=betas,
        ks=ks,
        steps_grid=steps_grid,
        seeds=seeds,
        bench_cell=bench_cell,
        out=out,
        jobs=jobs,
    )


@cli.command()
@bench_options
@click.option("--policy", "policies", default=None, help="Precision policies, e.g. 'double,mixed,single'.")
@_exit_codes
def reconstruct(betas, ks, steps_grid, seeds, bench_cell, config_path, out, jobs, policies):
    """
    Measure the round trip reconstruction error of the reversible solver.
    """
    _run_bench(
        "reconstruct",
        lab.RECONSTRUCT_COLUMNS,
        "Reconstruction",
        config_path,
        betas=betas,
        ks=ks,
        steps_grid=steps_grid,
        seeds=seeds,
        bench_cell=bench_cell,
        out=out,
        jobs=jobs,
        policies=policies,
    )


@cli.command()
@bench_options
@click.option("--adjoint-steps", "adjoint_grid", default=None, help="Adjoint step grid m of the ift engine.")
@_exit_codes
def accuracy(betas, ks, steps_grid, seeds, bench_cell, config_path, out, jobs, adjoint_grid):
    """
    Measure the gradient error of every engine against the unrolled oracle.
    """
    _run_bench(
        "accuracy",
        lab.ACCURACY_COLUMNS,
        "Gradient Accuracy",
        config_path,
        betas=betas,
        ks=ks,
        steps_grid=steps_grid,
        seeds=seeds,
        bench_cell=bench_cell,
        out=out,
        jobs=jobs,
        adjoint_grid=adjoint_grid,
    )


def train_options(command):
    """
    The training flags shared by train and nfe.
    """
    options = [
        click.option("--task", "task", type=click.Choice(["spirals", "regression"]), default=None, help="Dataset."),
        click.option("--samples", "samples", type=int, default=None, help="Dataset size."),
        click.option("--train-steps", "train_steps", type=int, default=None, help="SGD steps."),
        click.option("--batch-size", "batch_size", type=int, default=None),
        click.option("--lr", "lr", type=float, default=None, help="Initial learning rate."),
        click.option("--train-seed", "train_seed", type=int, default=None, help="Seed of data, model and batches."),
        click.option(
            "--engine",
            "engine",
            type=click.Choice([engine.get_identifier() for engine in get_gradient_engines()]),
            default=None,
        ),
    ]
    for option in reversed(options):
        command = option(command)
    return command


@cli.command()
@config_option
@solver_options
@train_options
@click.option("--checkpoint", "checkpoint", type=click.Path(dir_okay=False), default=None, help="Checkpoint to write.")
@click.option("--resume", "resume", type=click.Path(dir_okay=False), default=None, help="Checkpoint to resume from.")
@out_option
@_exit_codes
def train(
    config_path,
    beta,
    tol,
    max_steps,
    precision,
    stop_rule,
    task,
    samples,
    train_steps,
    batch_size,
    lr,
    train_seed,
    engine,
    checkpoint,
    resume,
    out,
):
    """
    Train an equilibrium model on a toy task, writing per-step metrics.
    """
    config = _load(
        config_path,
        beta=beta,
        tol=tol,
        max_steps=max_steps,
        precision=precision,
        stop_rule=stop_rule,
        task=task,
        samples=samples,
        train_steps=train_steps,
        batch_size=batch_size,
        lr=lr,
        train_seed=train_seed,
        engine=engine,
        checkpoint=checkpoint,
        resume=resume,
        out=out,
    )
    config.solver.validate(reversible=config.run.engine in ("reversible", "unrolled"))
    train_task = config.train.validate()

    state = None
    if config.run.resume:
        loaded = checkpoint_format.load_checkpoint(config.run.resume)
        state = checkpoint_format.state_from_checkpoint(loaded, train_task)

    result = training.train(train_task, config.run.engine, config.solver, state, config.adjoint_config())
    if result.diverged:
        click.echo(f"Training halted by divergence at step {result.state.step + 1}", err=True)

    tail = result.rows[-5:]
    _print_rows("Training", tail, training.TRAIN_COLUMNS)
    _write_rows(config.run.out, result.rows, training.TRAIN_COLUMNS)

    if config.run.checkpoint:
        saved = checkpoint_format.checkpoint_from_state(result.state, train_task, config.run.engine)
        path = checkpoint_format.save_checkpoint(results.resolve_output(config.run.checkpoint), saved)
        click.echo(f"Wrote checkpoint at step {result.state.step} to {path}")


@cli.command()
@config_option
@train_options
@click.option("--steps", "steps_grid", default=None, help="Solver step grid N, e.g. '1,2,3,4,8'.")
@click.option("--seeds", "seeds", default=None, help="Seeds, medians are reported.")
@click.option("--beta", "beta", type=float, default=None)
@out_option
@jobs_option
@_exit_codes
def nfe(
    config_path, task, samples, train_steps, batch_size, lr, train_seed, engine, steps_grid, seeds, beta, out, jobs
):
    """
    Final training loss as a function of the solver step count.
    """
    config = _load(
        config_path,
        task=task,
        samples=samples,
        train_steps=train_steps,
        batch_size=batch_size,
        lr=lr,
        train_seed=train_seed,
        engine=engine,
        steps_grid=steps_grid,
        seeds=seeds,
        beta=beta,
        out=out,
        jobs=jobs,
    )
    config.solver.validate(reversible=config.run.engine in ("reversible", "unrolled"))
    spec = config.experiment
    rows = lab.nfe_sweep(
        config.train.validate(), spec.steps, spec.seeds, config.run.engine, config.solver, spec.jobs
    )
    _print_rows("Function Evaluations", rows, lab.NFE_COLUMNS)
    _write_rows(config.run.out, rows, lab.NFE_COLUMNS)


def main():
    """
    Main method of the EquilibriumLab program. Usage errors are configuration errors and exit with code 1.
    """
    try:
        code = cli.main(standalone_mode=False)
    except click.exceptions.ClickException as e:
        e.show()
        code = EXIT_CONFIG
    except click.exceptions.Abort:
        code = EXIT_CONFIG
    sys.exit(code or 0)


if __name__ == "__main__":
    main()
