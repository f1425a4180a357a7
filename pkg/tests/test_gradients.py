import time

import numpy as np
import pytest

from EquilibriumLab.lib.cell_util import make_input, parse_cell
from EquilibriumLab.lib.equilibrium import make_diagonal_cell, make_linear_cell, make_mlp_cell
from EquilibriumLab.lib.errors import ConfigError, ShapeError
from EquilibriumLab.lib.gradients import (
    ADJOINT_MAX_STEPS,
    ENGINES,
    compute_gradient,
    get_engine,
    get_gradient_engines,
    grad_check,
    ift_gradient,
    relative_error,
    reversible_backprop,
    unrolled_gradient,
)
from EquilibriumLab.lib.solvers import SolverConfig, naive_iterate, reversible_forward
from EquilibriumLab.lib.tensor import Tensor

HALF = parse_cell("linear:0.5")
X0 = Tensor([0.0])
ONE = Tensor([1.0])
# Complex coupled eigenvalues of modulus 0.2, so reconstruction error stays flat over many steps.
SCALAR_CFG = SolverConfig(beta=1.2, max_steps=30, stop_rule="fixed_steps")


def test_engine_registry():
    assert sorted(engine.get_identifier() for engine in get_gradient_engines()) == sorted(ENGINES)
    assert get_engine("ift").get_identifier() == "ift"

    with pytest.raises(ConfigError) as info:
        get_engine("adjoint")
    assert info.value.key == "engine"


def test_reversible_gradient_of_scalar_cell():
    result, report = compute_gradient("reversible", HALF, X0, SCALAR_CFG, ONE)

    assert report.theta_grad["A"].numpy()[0, 0] == pytest.approx(4.0, abs=1e-6)
    assert report.theta_grad["b"].numpy()[0] == pytest.approx(2.0, abs=1e-6)
    assert report.x_grad.numpy()[0] == pytest.approx(2.0, abs=1e-6)
    assert report.nfe_forward == 60 and report.nfe_backward == 60


def test_reversible_matches_unrolled_on_scalar_cell():
    __, reversible = compute_gradient("reversible", HALF, X0, SCALAR_CFG, ONE)
    __, unrolled = compute_gradient("unrolled", HALF, X0, SCALAR_CFG, ONE)

    assert np.allclose(reversible.flat(), unrolled.flat(), atol=1e-9, rtol=0)
    assert unrolled.nfe_backward == 0


def test_implicit_and_jacobian_free_gradients():
    __, ift = compute_gradient(
        "ift", HALF, X0, SCALAR_CFG, ONE, adjoint_cfg=SolverConfig(beta=1.0, max_steps=64, stop_rule="fixed_steps")
    )
    __, jfb = compute_gradient("jfb", HALF, X0, SCALAR_CFG, ONE)

    assert ift.theta_grad["A"].numpy()[0, 0] == pytest.approx(4.0, abs=1e-9)
    assert ift.theta_grad["b"].numpy()[0] == pytest.approx(2.0, abs=1e-9)
    assert ift.nfe_backward == 65
    assert jfb.theta_grad["A"].numpy()[0, 0] == pytest.approx(2.0, abs=1e-9)
    assert jfb.nfe_backward == 1


def test_ift_adjoint_uses_forward_config_by_default():
    cfg = SolverConfig(beta=0.8, tol=1e-10, max_steps=200)
    __, report = compute_gradient("ift", HALF, X0, cfg, ONE)
    assert report.theta_grad["b"].numpy()[0] == pytest.approx(2.0, abs=1e-8)


def test_ift_adjoint_outlasts_short_forward_solves():
    f = make_diagonal_cell(0.9, width=3)
    x = f.zero_input()
    cfg = SolverConfig()
    result = reversible_forward(f, x, cfg)

    report = get_engine("ift").backward(f, x, result, Tensor(np.ones(3)), cfg)
    expected = 1.0 / (1.0 - 0.9 * np.linspace(1.0, 0.6, 3))
    assert np.allclose(report.theta_grad["b"].numpy(), expected, rtol=1e-5)
    assert 100 < report.nfe_backward <= ADJOINT_MAX_STEPS + 1


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("beta,steps", [(0.5, 4), (0.5, 8), (0.8, 3), (0.9, 2)])
def test_reversible_is_exact_against_unrolled(beta, steps, seed):
    f = make_mlp_cell(8, 16, 0.9, seed=seed)
    x = make_input(f, seed=seed)
    cfg = SolverConfig(beta=beta, max_steps=steps, stop_rule="fixed_steps")
    cotangent = Tensor(np.random.default_rng(seed + 1).standard_normal(8))

    result = reversible_forward(f, x, cfg)
    reversible = reversible_backprop(f, x, result, cotangent, cfg)
    unrolled = unrolled_gradient(f, x, cfg, cotangent)

    assert relative_error(reversible.flat(), unrolled.flat()) <= 1e-9
    assert relative_error(reversible.x_grad.numpy(), unrolled.x_grad.numpy()) <= 1e-9


def test_terminal_y_cotangent():
    f = make_mlp_cell(4, 6, 0.5, seed=1)
    x = make_input(f, seed=1)
    cfg = SolverConfig(beta=0.5, max_steps=6, stop_rule="fixed_steps")
    z_cot, y_cot = Tensor([1.0, 0.0, -1.0, 2.0]), Tensor([0.5, 0.5, 0.0, -1.0])

    reversible = reversible_backprop(f, x, reversible_forward(f, x, cfg), z_cot, cfg, y_cotangent=y_cot)
    unrolled = unrolled_gradient(f, x, cfg, z_cot, y_cotangent=y_cot)

    assert relative_error(reversible.flat(), unrolled.flat()) <= 1e-9


def test_batched_gradient_matches_unrolled():
    f = make_mlp_cell(4, 6, 0.5, seed=0)
    x = make_input(f, seed=0, batch=3)
    cfg = SolverConfig(beta=0.5, max_steps=8, stop_rule="fixed_steps")
    cotangent = Tensor(np.ones((3, 4)))

    __, reversible = compute_gradient("reversible", f, x, cfg, cotangent)
    __, unrolled = compute_gradient("unrolled", f, x, cfg, cotangent)

    assert reversible.x_grad.shape == (3, 6)
    assert relative_error(reversible.flat(), unrolled.flat()) <= 1e-9


def test_unrolled_replays_realized_steps():
    cfg = SolverConfig(beta=0.8, tol=1e-8, max_steps=100)
    result, reversible = compute_gradient("reversible", HALF, X0, cfg, ONE)
    __, unrolled = compute_gradient("unrolled", HALF, X0, cfg, ONE)

    assert result.converged and result.steps_taken < 100
    assert reversible.nfe_backward == 2 * result.steps_taken
    assert np.allclose(reversible.flat(), unrolled.flat(), atol=1e-9, rtol=0)


def test_reversible_memory_is_constant_in_steps():
    f = make_linear_cell([[0.0, 0.0], [0.0, 0.0]], [0.0, 0.0])
    x = f.zero_input()
    reversible_peaks, unrolled_peaks = [], []

    for steps in (8, 64, 512):
        cfg = SolverConfig(max_steps=steps, stop_rule="fixed_steps")
        reversible_peaks.append(compute_gradient("reversible", f, x, cfg, Tensor(np.ones(2)))[1].peak_stored_tensors)
        unrolled_peaks.append(compute_gradient("unrolled", f, x, cfg, Tensor(np.ones(2)))[1].peak_stored_tensors)

    assert reversible_peaks[0] == reversible_peaks[1] == reversible_peaks[2]
    assert unrolled_peaks[0] < unrolled_peaks[1] < unrolled_peaks[2]
    assert reversible_peaks[1] < unrolled_peaks[1]


def test_ift_truncation_decays_at_contraction_rate():
    f = make_diagonal_cell(0.8, width=3)
    x = f.zero_input()
    cfg = SolverConfig(beta=0.8, max_steps=256, stop_rule="fixed_steps")
    cotangent = Tensor(np.ones(3))

    oracle = unrolled_gradient(f, x, cfg, cotangent).flat()
    z_star = reversible_forward(f, x, cfg).z

    errors = []
    for steps in (10, 30):
        adjoint_cfg = SolverConfig(beta=1.0, max_steps=steps, stop_rule="fixed_steps")
        errors.append(relative_error(ift_gradient(f, x, z_star, cotangent, adjoint_cfg).flat(), oracle))

    assert errors[1] < errors[0]
    assert (errors[1] / errors[0]) ** (1 / 20) == pytest.approx(0.8, abs=0.1)


def test_grad_check_reversible():
    f = make_mlp_cell(4, 6, 0.9, seed=0)
    report = grad_check(f, make_input(f, seed=0), SolverConfig(beta=0.5, max_steps=8))

    assert report.engine == "reversible"
    assert report.max_relative <= 1e-5
    assert [row.name for row in report.parameters] == ["W1", "b1", "W2", "b2"]
    assert report.engine_grad.shape == report.fd_grad.shape


def test_grad_check_reports_jfb_bias():
    report = grad_check(HALF, X0, SCALAR_CFG, engine="jfb")
    assert report.max_relative > 0.1


def test_backprop_errors():
    naive = naive_iterate(HALF, X0, SolverConfig(max_steps=4))
    with pytest.raises(ConfigError):
        reversible_backprop(HALF, X0, naive, ONE, SolverConfig())

    result = reversible_forward(HALF, X0, SolverConfig(max_steps=4))
    with pytest.raises(ShapeError):
        reversible_backprop(HALF, X0, result, Tensor([1.0, 1.0]), SolverConfig(max_steps=4))


def test_relative_error():
    assert relative_error(np.array([1.0, 2.0]), np.array([1.0, 4.0])) == pytest.approx(0.5)
    assert relative_error(np.array([0.5]), np.array([0.0])) == pytest.approx(0.5)
    assert relative_error(np.zeros(0), np.zeros(0)) == 0.0


def _best_backprop_time(f, x, cfg, cotangent, repeats=5):
    result = reversible_forward(f, x, cfg)
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        reversible_backprop(f, x, result, cotangent, cfg)
        best = min(best, time.perf_counter() - start)
    return best


def test_reversible_backprop_time_grows_linearly_in_steps():
    f = make_mlp_cell(8, 16, 0.5, seed=0)
    x = make_input(f, seed=0)
    cotangent = Tensor(np.ones(8))
    cfg = SolverConfig(beta=0.5, stop_rule="fixed_steps")

    short = _best_backprop_time(f, x, cfg.replace(max_steps=16), cotangent)
    long = _best_backprop_time(f, x, cfg.replace(max_steps=256), cotangent)

    # 16 times the steps, loose against timer noise.
    assert 4 < long / short < 64
