"""
Textual cell specifications, used by the configuration file and the command line:

    linear:K          scalar LinearCell f(z) = K z + 1 + x (no rescaling, K may exceed one)
    diag:K:WIDTH      diagonal LinearCell diag(K, ..., 0.6 K) with b = 1
    mlp:W:H:K         MlpCell of width W, hidden size H and Lipschitz bound K (seeded)
"""

from typing import Optional

import numpy as np

from EquilibriumLab.lib.equilibrium import (
    EquilibriumFunction,
    LinearCell,
    make_diagonal_cell,
    make_linear_cell,
    make_mlp_cell,
)
from EquilibriumLab.lib.errors import ConfigError, DomainError
from EquilibriumLab.lib.tensor import Tensor

CELL_KINDS = ("linear", "diag", "mlp")


def parse_cell(spec: str, seed: int = 0, key: str = "cell") -> EquilibriumFunction:
    """
    Build an equilibrium function from its textual specification.

    :param spec: The specification string, see the module documentation.
    :param seed: Seed used by randomly initialised cells.
    :param key: The configuration key reported in errors.
    :return: The EquilibriumFunction.
    """
    kind, *args = spec.split(":")

    try:
        if kind == "linear" and len(args) == 1:
            return make_linear_cell([[float(args[0])]], [1.0])
        if kind == "diag" and len(args) in (1, 2):
            width = int(args[1]) if len(args) == 2 else 2
            return make_diagonal_cell(float(args[0]), width)
        if kind == "mlp" and len(args) == 3:
            return make_mlp_cell(int(args[0]), int(args[1]), float(args[2]), seed)
    except (ValueError, DomainError) as exp:
        raise ConfigError(key, f"invalid cell specification {spec!r} ({exp})")

    raise ConfigError(key, f"expected one of 'linear:K', 'diag:K[:WIDTH]', 'mlp:W:H:K', got {spec!r}")


def make_input(f: EquilibriumFunction, seed: int, batch: Optional[int] = None) -> Tensor:
    """
    The input x used with a parsed cell: zero for linear cells (so their fixed point is (I - A)^-1 b), seeded
    standard normal for any other cell.
    """
    shape = (f.input_width,) if batch is None else (batch, f.input_width)
    if isinstance(f, LinearCell):
        return Tensor(np.zeros(shape))
    return Tensor(np.random.default_rng(seed + 1).standard_normal(shape))
