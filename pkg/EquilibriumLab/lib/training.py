"""
Training Package:
Stochastic gradient descent on an EquilibriumModel. The learning rate is halved whenever the mean training loss of a
window of steps fails to improve on the best window so far. A solve that diverges halts the run, the rows recorded
up to that point are kept...
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

from EquilibriumLab.lib.datasets import DATASETS, Dataset, make_dataset
from EquilibriumLab.lib.errors import ConfigError, DivergenceError, ReconstructionError
from EquilibriumLab.lib.gradients import GradientEngine, get_engine
from EquilibriumLab.lib.model import EquilibriumModel, loss_and_gradient, make_model
from EquilibriumLab.lib.solvers import SolverConfig
from EquilibriumLab.lib.tensor import Tensor

logger = logging.getLogger(__name__)

TRAIN_COLUMNS = ("step", "loss", "accuracy", "nfe_cumulative", "lr")


@dataclass(frozen=True)
class TrainTask:
    """
    What to train and how. The dataset and the initial model are fully determined by seed.
    """

    dataset: str = "spirals"
    samples: int = 256
    width: int = 8
    hidden: int = 16
    target_k: float = 0.9
    activation: str = "tanh"
    steps: int = 2000
    batch_size: int = 64
    lr: float = 0.5
    patience: int = 100
    seed: int = 0

    def validate(self) -> "TrainTask":
        if self.dataset not in DATASETS:
            raise ConfigError("dataset", f"must be one of {list(DATASETS)}, got {self.dataset!r}")
        for key in ("samples", "width", "hidden", "batch_size", "patience"):
            if getattr(self, key) < 1:
                raise ConfigError(key, f"must be positive, got {getattr(self, key)!r}")
        if self.steps < 0:
            raise ConfigError("steps", f"must be non-negative, got {self.steps!r}")
        if not 0 < self.target_k < 1:
            raise ConfigError("target_k", f"must lie in (0, 1), got {self.target_k!r}")
        if not self.lr > 0:
            raise ConfigError("lr", f"must be positive, got {self.lr!r}")
        return self

    def make_dataset(self) -> Dataset:
        return make_dataset(self.dataset, self.samples, self.seed)

    def make_model(self, data: Dataset) -> EquilibriumModel:
        out_dim = data.num_classes if data.is_classification else data.targets.shape[1]
        return make_model(
            data.features.shape[1],
            out_dim,
            self.width,
            self.hidden,
            self.target_k,
            self.seed,
            data.num_classes,
            self.activation,
        )


@dataclass
class TrainState:
    """
    Everything needed to resume a run: parameters, step, learning rate schedule and the batch sampler's state.
    """

    model: EquilibriumModel
    step: int
    lr: float
    rng: np.random.Generator
    best_window_loss: float = float("inf")
    window: List[float] = field(default_factory=list)
    nfe_cumulative: int = 0

    @classmethod
    def initial(cls, task: TrainTask, model: EquilibriumModel) -> "TrainState":
        return cls(model, 0, task.lr, np.random.default_rng([task.seed, 2]))

    def optimizer_state(self) -> Dict[str, Any]:
        return {
            "lr": self.lr,
            "best_window_loss": self.best_window_loss,
            "window": list(self.window),
            "nfe_cumulative": self.nfe_cumulative,
        }


@dataclass
class TrainResult:
    rows: List[Dict[str, Any]]
    state: TrainState
    diverged: bool = False


def _sgd_step(model: EquilibriumModel, grads: Dict[str, np.ndarray], lr: float, target_k: float) -> EquilibriumModel:
    """
    PRIVATE METHOD:
    One gradient step on every parameter, followed by projecting the cell back inside its Lipschitz bound...
    """
    params = model.parameters()
    stepped = model.with_parameters({name: Tensor(value.numpy() - lr * grads[name]) for name, value in params.items()})
    return stepped.with_cell(stepped.cell.project_lipschitz(target_k))


def _update_schedule(state: TrainState, loss: float, patience: int):
    state.window.append(loss)
    if len(state.window) < patience:
        return

    window_loss = float(np.mean(state.window))
    state.window = []
    if window_loss < state.best_window_loss:
        state.best_window_loss = window_loss
    else:
        state.lr /= 2
        logger.warning("Training loss plateaued at step %d, halving learning rate to %r", state.step, state.lr)


def train(
    task: TrainTask,
    engine: str = "reversible",
    cfg: SolverConfig = SolverConfig(stop_rule="fixed_steps"),
    state: Optional[TrainState] = None,
    adjoint_cfg: Optional[SolverConfig] = None,
) -> TrainResult:
    """
    Train an equilibrium model for task.steps steps (counted from state.step when resuming).

    :param task: The training task.
    :param engine: Identifier of the gradient engine.
    :param cfg: Solver config of the equilibrium layer.
    :param state: Resume from this state instead of initialising from the task.
    :param adjoint_cfg: Adjoint config for the ift engine.
    :return: A TrainResult with one row per step: step, loss, accuracy, nfe_cumulative, lr.
    """
    task.validate()
    runner: GradientEngine = get_engine(engine, adjoint_cfg)
    data = task.make_dataset()
    if state is None:
        state = TrainState.initial(task, task.make_model(data))

    rows = []
    diverged = False
    logger.info("Training %s with the %s engine for %d steps", task.dataset, engine, task.steps - state.step)

    while state.step < task.steps:
        batch = data.batch(state.rng, task.batch_size)
        try:
            output, grads, __, __ = loss_and_gradient(state.model, batch, runner, cfg)
        except (DivergenceError, ReconstructionError) as e:
            logger.warning("Halting training at step %d: %s", state.step + 1, e)
            diverged = True
            break

        if not np.isfinite(output.loss):
            logger.warning("Halting training at step %d: non-finite loss", state.step + 1)
            diverged = True
            break

        state.model = _sgd_step(state.model, grads, state.lr, task.target_k)
        state.step += 1
        state.nfe_cumulative += output.nfe
        rows.append(
            {
                "step": state.step,
                "loss": output.loss,
                "accuracy": output.accuracy,
                "nfe_cumulative": state.nfe_cumulative,
                "lr": state.lr,
            }
        )
        _update_schedule(state, output.loss, task.patience)

        if state.step % max(1, task.steps // 10) == 0:
            logger.info("step %d loss %.6f lr %r", state.step, output.loss, state.lr)

    return TrainResult(rows, state, diverged)
