"""
Model Package:
An equilibrium classifier/regressor: an affine embedding of the features is injected into an MlpCell, whose fixed
point goes through an affine readout,

    x = U a + c,    z* = f(z*, x),    out = Wo z* + bo

The cell is solved and differentiated by a gradient engine. The embedding and readout are plain affine maps whose
gradients are formed directly from the engine's cotangents...
"""

import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from EquilibriumLab.lib.datasets import Dataset
from EquilibriumLab.lib.equilibrium import MlpCell, make_mlp_cell
from EquilibriumLab.lib.errors import ShapeError
from EquilibriumLab.lib.gradients import GradientEngine, GradientReport
from EquilibriumLab.lib.solvers import SolveResult, SolverConfig
from EquilibriumLab.lib.tensor import Tensor

CELL_PREFIX = "cell."


@dataclass(frozen=True)
class ModelOutput:
    loss: float
    accuracy: Optional[float]
    nfe: int


class EquilibriumModel:
    """
    Immutable container of the model parameters. Parameter names are "embed.U", "embed.c", "cell.<name>" for
    every cell parameter, "readout.W" and "readout.b".
    """

    def __init__(self, cell: MlpCell, U: np.ndarray, c: np.ndarray, Wo: np.ndarray, bo: np.ndarray, classes: int):
        if U.shape != (cell.input_width, U.shape[1]) or c.shape != (cell.input_width,):
            raise ShapeError("EquilibriumModel", U.shape, (cell.input_width,))
        if Wo.shape != (bo.shape[0], cell.width):
            raise ShapeError("EquilibriumModel", Wo.shape, (bo.shape[0], cell.width))

        self.cell = cell
        self.U = np.array(U, dtype=np.float64)
        self.c = np.array(c, dtype=np.float64)
        self.Wo = np.array(Wo, dtype=np.float64)
        self.bo = np.array(bo, dtype=np.float64)
        self.classes = classes

    @property
    def is_classifier(self) -> bool:
        return self.classes > 0

    def parameters(self) -> Dict[str, Tensor]:
        params = {"embed.U": Tensor(self.U), "embed.c": Tensor(self.c)}
        params.update({CELL_PREFIX + name: value for name, value in self.cell.parameters.items()})
        params.update({"readout.W": Tensor(self.Wo), "readout.b": Tensor(self.bo)})
        return params

    def with_parameters(self, params: Dict[str, Tensor]) -> "EquilibriumModel":
        cell = self.cell.with_parameters(
            {name[len(CELL_PREFIX) :]: value for name, value in params.items() if name.startswith(CELL_PREFIX)}
        )
        return EquilibriumModel(
            cell,
            params["embed.U"].numpy(),
            params["embed.c"].numpy(),
            params["readout.W"].numpy(),
            params["readout.b"].numpy(),
            self.classes,
        )

    def with_cell(self, cell: MlpCell) -> "EquilibriumModel":
        return EquilibriumModel(cell, self.U, self.c, self.Wo, self.bo, self.classes)

    def embed(self, features: np.ndarray) -> Tensor:
        return Tensor(features @ self.U.T + self.c)

    def readout(self, z: np.ndarray) -> np.ndarray:
        return z @ self.Wo.T + self.bo


def make_model(
    in_dim: int,
    out_dim: int,
    width: int,
    hidden: int,
    target_k: float,
    seed: int,
    classes: int = 0,
    activation: str = "tanh",
) -> EquilibriumModel:
    """
    Initialise a model deterministically from seed. The cell uses seed itself, the affine maps a derived stream.

    :param in_dim: Feature dimension.
    :param out_dim: Number of outputs (classes for a classifier).
    :param width: Dimension of the equilibrium state.
    :param hidden: Hidden dimension of the cell, also the embedding dimension.
    :param target_k: Lipschitz bound of the initial cell.
    :param seed: Initialisation seed.
    :param classes: Number of classes, 0 for regression.
    :param activation: Activation of the cell.
    """
    cell = make_mlp_cell(width, hidden, target_k, seed, activation)
    rng = np.random.default_rng([seed, 1])
    U = 2.0 * rng.standard_normal((hidden, in_dim)) / math.sqrt(in_dim)
    c = np.zeros(hidden)
    Wo = rng.standard_normal((out_dim, width)) / math.sqrt(width)
    bo = np.zeros(out_dim)
    return EquilibriumModel(cell, U, c, Wo, bo, classes)


def _loss_and_cotangent(
    model: EquilibriumModel, out: np.ndarray, targets: np.ndarray
) -> Tuple[float, np.ndarray, Optional[float]]:
    """
    PRIVATE METHOD:
    Mean loss over the batch, its gradient w.r.t. the model outputs, and the accuracy for classifiers...
    """
    batch = out.shape[0]

    if model.is_classifier:
        shifted = out - out.max(axis=1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        loss = -float(np.mean(log_probs[np.arange(batch), targets]))
        grad = np.exp(log_probs)
        grad[np.arange(batch), targets] -= 1.0
        accuracy = float(np.mean(np.argmax(out, axis=1) == targets))
        return loss, grad / batch, accuracy

    diff = out - targets
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size, None


def evaluate(model: EquilibriumModel, data: Dataset, engine: GradientEngine, cfg: SolverConfig) -> ModelOutput:
    """
    Loss and accuracy of the model on a whole dataset, no gradient.
    """
    result = engine.solve(model.cell, model.embed(data.features), cfg)
    loss, __, accuracy = _loss_and_cotangent(model, model.readout(result.z.numpy()), data.targets)
    return ModelOutput(loss, accuracy, result.nfe)


def loss_and_gradient(
    model: EquilibriumModel, data: Dataset, engine: GradientEngine, cfg: SolverConfig
) -> Tuple[ModelOutput, Dict[str, np.ndarray], SolveResult, GradientReport]:
    """
    Loss of the model on a batch and its gradient w.r.t. every model parameter.

    :return: (output, gradients keyed like model.parameters(), forward result, the cell's GradientReport)
    """
    x = model.embed(data.features)
    result = engine.solve(model.cell, x, cfg)
    z = result.z.numpy()
    out = model.readout(z)
    loss, out_bar, accuracy = _loss_and_cotangent(model, out, data.targets)

    z_bar = out_bar @ model.Wo
    report = engine.backward(model.cell, x, result, Tensor(z_bar), cfg)
    x_bar = report.x_grad.numpy()

    grads = {"embed.U": x_bar.T @ data.features, "embed.c": x_bar.sum(axis=0)}
    grads.update({CELL_PREFIX + name: value.numpy() for name, value in report.theta_grad.items()})
    grads.update({"readout.W": out_bar.T @ z, "readout.b": out_bar.sum(axis=0)})

    nfe = result.nfe + report.nfe_backward
    return ModelOutput(loss, accuracy, nfe), grads, result, report
