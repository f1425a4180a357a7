import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from EquilibriumLab.lib.cell_util import make_input, parse_cell
from EquilibriumLab.lib.equilibrium import (
    LinearCell,
    MlpCell,
    estimate_lipschitz,
    flatten_parameters,
    make_diagonal_cell,
    make_linear_cell,
    make_mlp_cell,
    spectral_norm,
    unflatten_parameters,
)
from EquilibriumLab.lib.errors import ConfigError, DomainError, ShapeError
from EquilibriumLab.lib.tape import finite_diff_grad
from EquilibriumLab.lib.tensor import Tensor


def test_linear_cell_evaluates_affine_map():
    f = make_linear_cell([[0.5]], [1.0])
    assert f.eval(Tensor([2.0]), Tensor([0.0])).numpy()[0] == 2.0
    assert f.lipschitz == pytest.approx(0.5)


def test_linear_cell_rescaling_hits_target():
    f = make_linear_cell([[2.0, 1.0], [0.0, 3.0]], [0.0, 0.0], target_k=0.7)
    assert spectral_norm(f.parameters["A"].numpy()) == pytest.approx(0.7, abs=1e-8)
    assert f.lipschitz == pytest.approx(0.7, abs=1e-8)


def test_make_linear_cell_errors():
    with pytest.raises(ShapeError):
        make_linear_cell([[1.0, 2.0]], [1.0])
    with pytest.raises(DomainError):
        make_linear_cell([[1.0]], [1.0], target_k=1.0)


def test_fixed_point_of_linear_cell():
    f = make_diagonal_cell(0.5)
    q = f.fixed_point(f.zero_input())
    assert np.allclose(q, [2.0, 1.0 / 0.7])
    assert np.allclose(f.eval(Tensor(q), f.zero_input()).numpy(), q)


def test_mlp_cell_shapes_and_declared_bound():
    f = make_mlp_cell(8, 16, 0.9, seed=3)
    z, x = f.zero_state(), make_input(f, seed=3)

    assert f.width == 8 and f.hidden == 16 and f.input_width == 16
    assert f.eval(z, x).shape == (8,)
    assert f.lipschitz == pytest.approx(0.9, abs=1e-6)


def test_mlp_cell_is_seed_deterministic():
    first = flatten_parameters(make_mlp_cell(4, 6, 0.5, seed=11).parameters)
    second = flatten_parameters(make_mlp_cell(4, 6, 0.5, seed=11).parameters)
    other = flatten_parameters(make_mlp_cell(4, 6, 0.5, seed=12).parameters)

    assert np.array_equal(first, second)
    assert not np.array_equal(first, other)


@settings(max_examples=10, deadline=None)
@given(st.floats(0.1, 0.95), st.integers(0, 1000))
def test_estimated_lipschitz_never_exceeds_declared(k, seed):
    f = make_mlp_cell(4, 8, k, seed)
    assert estimate_lipschitz(f, 64, seed) <= f.lipschitz + 1e-9


def test_estimate_lipschitz_of_linear_cell():
    f = make_linear_cell(np.diag([0.8, 0.1]), [0.0, 0.0])
    assert estimate_lipschitz(f, 256, seed=0) <= 0.8 + 1e-12
    with pytest.raises(DomainError):
        estimate_lipschitz(f, 0, seed=0)


def test_batched_evaluation_matches_rows():
    f = make_mlp_cell(3, 5, 0.5, seed=0)
    rng = np.random.default_rng(0)
    z, x = rng.standard_normal((4, 3)), rng.standard_normal((4, 5))
    batched = f.eval(Tensor(z), Tensor(x)).numpy()

    for row in range(4):
        assert np.allclose(batched[row], f.eval(Tensor(z[row]), Tensor(x[row])).numpy())


def test_linearize_pullbacks_match_finite_differences():
    f = make_mlp_cell(3, 5, 0.8, seed=1)
    z, x = Tensor([0.2, -0.1, 0.4]), make_input(f, seed=1)
    cotangent = np.array([1.0, -2.0, 0.5])
    cot = f.linearize(z, x).pullback(Tensor(cotangent))

    fd_z = finite_diff_grad(lambda p: float(np.dot(cotangent, f.eval(p, x).numpy())), z)
    assert np.allclose(cot.z.numpy(), fd_z.numpy(), atol=1e-8)

    like = f.parameters
    fd_theta = finite_diff_grad(
        lambda p: float(np.dot(cotangent, f.with_parameters(unflatten_parameters(p.numpy(), like)).eval(z, x).numpy())),
        Tensor(flatten_parameters(like)),
    )
    assert np.allclose(flatten_parameters(cot.theta), fd_theta.numpy(), atol=1e-8)


def test_state_shape_checked():
    f = make_diagonal_cell(0.5, width=2)
    with pytest.raises(ShapeError):
        f.eval(Tensor([1.0, 2.0, 3.0]), Tensor([0.0, 0.0]))


def test_with_parameters_keeps_kind():
    f = make_mlp_cell(2, 3, 0.5, seed=0, activation="relu")
    g = f.with_parameters(f.parameters)
    assert isinstance(g, MlpCell) and g.activation == "relu"
    assert isinstance(make_diagonal_cell(0.3).with_parameters(make_diagonal_cell(0.1).parameters), LinearCell)


def test_unflatten_rejects_wrong_length():
    with pytest.raises(ShapeError):
        unflatten_parameters(np.zeros(8), make_diagonal_cell(0.5).parameters)


def test_parse_cell_specs():
    assert isinstance(parse_cell("linear:0.5"), LinearCell)
    assert parse_cell("diag:0.5:3").width == 3
    assert parse_cell("mlp:4:6:0.5").hidden == 6

    for bad in ("linear", "mlp:4:6:1.5", "cube:1", "diag:x"):
        with pytest.raises(ConfigError):
            parse_cell(bad)


def test_make_input_is_zero_for_linear_cells():
    assert np.array_equal(make_input(parse_cell("linear:0.5"), seed=4).numpy(), [0.0])
    assert make_input(parse_cell("mlp:4:6:0.5"), seed=4, batch=3).shape == (3, 6)


def test_linear_cell_vjps_are_transposed_products():
    rng = np.random.default_rng(4)
    f = make_linear_cell(rng.standard_normal((3, 3)), [0.1, 0.2, 0.3], target_k=0.7)
    A = f.parameters["A"].numpy()
    z, x, g = Tensor(rng.standard_normal(3)), Tensor(rng.standard_normal(3)), rng.standard_normal(3)

    assert np.allclose(f.vjp_z(z, x, Tensor(g)).numpy(), A.T @ g, rtol=0, atol=1e-14)
    assert np.array_equal(f.vjp_x(z, x, Tensor(g)).numpy(), g)

    theta = f.vjp_theta(z, x, Tensor(g))
    assert np.allclose(theta["A"].numpy(), np.outer(g, z.numpy()), rtol=0, atol=1e-14)
    assert np.array_equal(theta["b"].numpy(), g)


def test_mlp_vjp_theta_matches_finite_differences():
    f = make_mlp_cell(3, 4, 0.8, seed=2)
    z, x = Tensor([0.3, -0.2, 0.1]), make_input(f, seed=2)
    g = np.array([0.5, 1.0, -1.5])
    like = f.parameters

    fd = finite_diff_grad(
        lambda p: float(np.dot(g, f.with_parameters(unflatten_parameters(p.numpy(), like)).eval(z, x).numpy())),
        Tensor(flatten_parameters(like)),
    )
    assert np.allclose(flatten_parameters(f.vjp_theta(z, x, Tensor(g))), fd.numpy(), atol=1e-8)


def test_project_lipschitz_restores_contraction():
    f = make_mlp_cell(4, 6, 0.9, seed=5)
    params = f.parameters
    grown = f.with_parameters({**params, "W1": Tensor(3.0 * params["W1"].numpy())})
    assert grown.lipschitz > 2.0

    projected = grown.project_lipschitz(0.9)
    W1, W2 = projected.parameters["W1"].numpy(), projected.parameters["W2"].numpy()
    assert projected.lipschitz == 0.9
    assert spectral_norm(W1) * spectral_norm(W2) == pytest.approx(0.9, rel=1e-9)
    assert estimate_lipschitz(projected, 256, seed=0) <= 0.9 + 1e-9
    assert np.array_equal(projected.parameters["b1"].numpy(), params["b1"].numpy())
    assert projected.activation == f.activation

    assert f.project_lipschitz(0.95) is f
    with pytest.raises(DomainError):
        f.project_lipschitz(1.0)
