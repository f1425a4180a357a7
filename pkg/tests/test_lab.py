import math
from dataclasses import replace

import numpy as np
import pytest

from EquilibriumLab.lib.cell_util import make_input
from EquilibriumLab.lib.equilibrium import make_mlp_cell
from EquilibriumLab.lib.errors import ConfigError
from EquilibriumLab.lib.lab import (
    ACCURACY_COLUMNS,
    RECONSTRUCT_COLUMNS,
    SWEEP_COLUMNS,
    ExperimentSpec,
    convergence_sweep,
    gradient_accuracy_bench,
    make_cell,
    nfe_sweep,
    parse_grid,
    reconstruction_bench,
    roundtrip_error,
    run_experiment,
    run_jobs,
)
from EquilibriumLab.lib.tensor import PrecisionPolicy
from EquilibriumLab.lib.training import TrainTask

DOUBLE = PrecisionPolicy.parse("double")


def test_parse_grid():
    assert parse_grid("0.5:1.3:0.1") == (0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.1, 1.2, 1.3)
    assert parse_grid("1,2,4", integer=True) == (1, 2, 4)
    assert parse_grid("0.8") == (0.8,)

    for bad in ("a:b:c", "1:2:0", "", "1:0:1"):
        with pytest.raises(ConfigError):
            parse_grid(bad)
    with pytest.raises(ConfigError):
        parse_grid("1.5", integer=True)


def test_run_jobs_keeps_order():
    assert run_jobs(lambda v: v * v, range(10), jobs=4) == [v * v for v in range(10)]


def test_sweep_row_values():
    (row,) = convergence_sweep(ExperimentSpec(betas=(0.8,), ks=(0.5,)))

    assert tuple(row) == SWEEP_COLUMNS
    assert row["L_predicted"] == pytest.approx(0.6)
    assert row["L_measured"] <= 0.61
    assert row["L_relaxed"] == pytest.approx(0.6, abs=1e-6)
    assert row["converged"] and row["within_bound"]


def test_sweep_converges_beyond_one():
    (row,) = convergence_sweep(ExperimentSpec(betas=(1.3,), ks=(0.5,)))
    assert row["within_bound"]
    assert row["converged"]


def test_every_row_within_bound_converges():
    spec = ExperimentSpec(betas=parse_grid("0.5:1.3:0.1"), ks=(0.1, 0.5, 0.9))
    rows = convergence_sweep(spec)

    assert len(rows) == 27
    assert [(row["k"], row["beta"]) for row in rows[:2]] == [(0.1, 0.5), (0.1, 0.6)]
    for row in rows:
        if row["within_bound"]:
            assert row["converged"], row
            assert row["L_measured"] <= row["L_predicted"] + 1e-6, row


def test_sweep_is_deterministic_across_jobs():
    spec = ExperimentSpec(betas=(0.5, 0.9, 1.2), ks=(0.3, 0.7))
    assert convergence_sweep(spec) == convergence_sweep(replace(spec, jobs=3))


@pytest.mark.parametrize("beta,steps", [(0.5, 8), (0.8, 3), (0.9, 2)])
def test_roundtrip_is_exact_in_double(beta, steps):
    f = make_mlp_cell(8, 16, 0.9, seed=0)
    assert roundtrip_error(f, make_input(f, seed=0), beta, steps, DOUBLE) <= 1e-10


# Two single precision roundings, the margin by which a mixed round trip may lose to a single one.
SINGLE_SLACK = 2 * float(np.finfo(np.float32).eps)


@pytest.mark.parametrize("steps", [2, 4, 8, 16, 32])
@pytest.mark.parametrize("beta", [0.5, 0.8, 0.9])
def test_mixed_precision_reconstructs_no_worse_than_single(beta, steps):
    mixed_policy, single_policy = PrecisionPolicy.parse("mixed"), PrecisionPolicy.parse("single")
    for seed in range(10):
        f = make_mlp_cell(8, 16, 0.9, seed=seed)
        x = make_input(f, seed=seed)
        with np.errstate(over="ignore", invalid="ignore"):
            mixed = roundtrip_error(f, x, beta, steps, mixed_policy)
            single = roundtrip_error(f, x, beta, steps, single_policy)
        assert mixed <= single + SINGLE_SLACK, (seed, mixed, single)


def test_reconstruction_bench_rows():
    spec = ExperimentSpec(
        kind="reconstruct", betas=(0.5,), ks=(0.5,), steps=(4,), policies=("double", "mixed"), seeds=(0, 1)
    )
    rows = reconstruction_bench(spec)

    assert [row["policy"] for row in rows] == ["double", "mixed"]
    assert all(tuple(row) == RECONSTRUCT_COLUMNS for row in rows)
    assert rows[0]["max_roundtrip_error"] <= 1e-10


def test_reconstruction_rejects_beta_one():
    with pytest.raises(ConfigError) as info:
        reconstruction_bench(ExperimentSpec(kind="reconstruct", betas=(1.0,)))
    assert info.value.key == "beta"


def test_gradient_accuracy_bench():
    spec = ExperimentSpec(
        kind="accuracy",
        betas=(0.5,),
        ks=(0.5,),
        steps=(2, 8),
        adjoint_steps=(1, 16),
        seeds=(0,),
        cell="linear",
        width=3,
    )
    rows = gradient_accuracy_bench(spec)
    by_key = {(row["engine"], row["N"], row["m"]): row for row in rows}

    assert all(tuple(row) == ACCURACY_COLUMNS for row in rows)
    assert len(rows) == 5
    assert by_key[("reversible", 8, None)]["error_vs_same_steps"] <= 1e-9
    assert by_key[("reversible", 8, None)]["nfe"] == 32
    assert by_key[("reversible", 8, None)]["error_vs_oracle"] < by_key[("reversible", 2, None)]["error_vs_oracle"]
    assert by_key[("ift", 256, 16)]["error_vs_oracle"] < by_key[("ift", 256, 1)]["error_vs_oracle"]
    assert math.isnan(by_key[("jfb", 256, 0)]["error_vs_same_steps"])


def test_make_cell_kinds():
    assert make_cell("linear", 0.4, 3, 5, seed=0).lipschitz == pytest.approx(0.4, abs=1e-8)
    assert make_cell("mlp", 0.4, 3, 5, seed=0).input_width == 5


def test_nfe_sweep_rows():
    task = TrainTask(samples=32, width=4, hidden=6, steps=3, batch_size=16)
    rows = nfe_sweep(task, (0, 2), seeds=(0,))

    assert [row["N"] for row in rows] == [0, 2]
    assert [row["nfe"] for row in rows] == [0, 4]
    assert all(np.isfinite(row["final_loss"]) for row in rows)


def test_run_experiment_dispatch():
    rows = run_experiment(ExperimentSpec(kind="sweep", betas=(0.8,), ks=(0.2,)))
    assert len(rows) == 1

    with pytest.raises(ConfigError):
        run_experiment(ExperimentSpec(kind="nfe"))


@pytest.mark.parametrize(
    "changes,key",
    [
        ({"kind": "bench"}, "kind"),
        ({"betas": ()}, "betas"),
        ({"ks": (1.0,)}, "ks"),
        ({"cell": "conv"}, "cell"),
        ({"jobs": 0}, "jobs"),
        ({"policies": ("half",)}, "precision_policy"),
    ],
)
def test_experiment_spec_validation(changes, key):
    with pytest.raises(ConfigError) as info:
        ExperimentSpec(**changes).validate()
    assert info.value.key == key


# Cross-entropy below this is a fitted training set, where relative changes are rounding noise.
LOSS_FLOOR = 0.01


@pytest.mark.slow
def test_final_loss_falls_then_plateaus_with_solver_steps():
    rows = nfe_sweep(TrainTask(), (1, 2, 3, 4, 8), seeds=(0, 1, 2), jobs=4)
    losses = {row["N"]: row["final_loss"] for row in rows}

    assert max(losses.values()) < 0.3
    for steps in (1, 2, 3):
        assert losses[steps + 1] <= losses[steps] + LOSS_FLOOR
    assert abs(losses[8] - losses[4]) <= 0.05 * losses[4] + LOSS_FLOOR
