"""
Run configuration of the command line: a JSON document with the sections "solver", "experiment", "train" and
"run", identified by its "format" and "version" fields. Every field has a default, unknown keys are rejected, and
command line flags override file values through FLAG_FIELDS...
"""

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Tuple, Union

from EquilibriumLab.lib.errors import ConfigError
from EquilibriumLab.lib.lab import ExperimentSpec, parse_grid
from EquilibriumLab.lib.solvers import SolverConfig
from EquilibriumLab.lib.tensor import PrecisionPolicy
from EquilibriumLab.lib.training import TrainTask

CURRENT_FORMAT_NAME = "equilibrium_run_config"
CURRENT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class RunSettings:
    """
    Settings of single runs: the cell and forward solver, the gradient engine, and the files a command reads and
    writes.
    """

    cell: str = "mlp:8:16:0.9"
    seed: int = 0
    solver: str = "reversible"
    engine: str = "reversible"
    fd_eps: float = 1e-5
    adjoint_steps: Optional[int] = None
    out: Optional[str] = None
    checkpoint: Optional[str] = None
    resume: Optional[str] = None


@dataclass(frozen=True)
class RunConfig:
    solver: SolverConfig = field(default_factory=SolverConfig)
    experiment: ExperimentSpec = field(default_factory=ExperimentSpec)
    train: TrainTask = field(default_factory=TrainTask)
    run: RunSettings = field(default_factory=RunSettings)

    def spec(self, kind: str) -> ExperimentSpec:
        """
        The experiment spec of kind, with the solver's tolerance.
        """
        return replace(self.experiment, kind=kind, tol=self.solver.tol)

    def adjoint_config(self) -> Optional[SolverConfig]:
        if self.run.adjoint_steps is None:
            return None
        return self.solver.replace(beta=1.0, max_steps=self.run.adjoint_steps, stop_rule="fixed_steps")


def _as_int(value: Any) -> int:
    if isinstance(value, bool) or int(value) != float(value):
        raise ValueError(f"{value!r} is not an integer")
    return int(value)


def _as_grid(key: str, integer: bool = False) -> Callable[[Any], Tuple]:
    def convert(value: Any) -> Tuple:
        if isinstance(value, str):
            return parse_grid(value, key, integer)
        values = tuple(value) if isinstance(value, (list, tuple)) else (value,)
        if not values:
            raise ValueError("grid must not be empty")
        return tuple(_as_int(v) for v in values) if integer else tuple(float(v) for v in values)

    return convert


def _as_names(key: str) -> Callable[[Any], Tuple[str, ...]]:
    def convert(value: Any) -> Tuple[str, ...]:
        if isinstance(value, str):
            return tuple(part.strip() for part in value.split(",") if part.strip())
        return tuple(str(v) for v in value)

    return convert


def _optional(convert: Callable[[Any], Any]) -> Callable[[Any], Any]:
    return lambda value: None if value is None else convert(value)


# Section -> field -> converter from JSON (or flag) values to the field's type.
SECTION_FIELDS: Dict[str, Dict[str, Callable[[Any], Any]]] = {
    "solver": {
        "beta": float,
        "tol": float,
        "max_steps": _as_int,
        "precision_policy": PrecisionPolicy.parse,
        "stop_rule": str,
    },
    "experiment": {
        "betas": _as_grid("experiment.betas"),
        "ks": _as_grid("experiment.ks"),
        "steps": _as_grid("experiment.steps", integer=True),
        "adjoint_steps": _as_grid("experiment.adjoint_steps", integer=True),
        "policies": _as_names("experiment.policies"),
        "seeds": _as_grid("experiment.seeds", integer=True),
        "cell": str,
        "width": _as_int,
        "hidden": _as_int,
        "jobs": _as_int,
    },
    "train": {
        "dataset": str,
        "samples": _as_int,
        "width": _as_int,
        "hidden": _as_int,
        "target_k": float,
        "activation": str,
        "steps": _as_int,
        "batch_size": _as_int,
        "lr": float,
        "patience": _as_int,
        "seed": _as_int,
    },
    "run": {
        "cell": str,
        "seed": _as_int,
        "solver": str,
        "engine": str,
        "fd_eps": float,
        "adjoint_steps": _optional(_as_int),
        "out": _optional(str),
        "checkpoint": _optional(str),
        "resume": _optional(str),
    },
}

# Command line flag -> the one dotted field it sets.
FLAG_FIELDS: Dict[str, str] = {
    "beta": "solver.beta",
    "tol": "solver.tol",
    "max_steps": "solver.max_steps",
    "precision": "solver.precision_policy",
    "stop_rule": "solver.stop_rule",
    "betas": "experiment.betas",
    "ks": "experiment.ks",
    "steps_grid": "experiment.steps",
    "adjoint_grid": "experiment.adjoint_steps",
    "policies": "experiment.policies",
    "seeds": "experiment.seeds",
    "bench_cell": "experiment.cell",
    "jobs": "experiment.jobs",
    "task": "train.dataset",
    "samples": "train.samples",
    "train_steps": "train.steps",
    "batch_size": "train.batch_size",
    "lr": "train.lr",
    "train_seed": "train.seed",
    "cell": "run.cell",
    "seed": "run.seed",
    "engine": "run.engine",
    "fd_eps": "run.fd_eps",
    "adjoint_steps": "run.adjoint_steps",
    "solver": "run.solver",
    "out": "run.out",
    "checkpoint": "run.checkpoint",
    "resume": "run.resume",
}


def _convert(section: str, key: str, value: Any) -> Any:
    if section not in SECTION_FIELDS:
        raise ConfigError(section, f"unknown section, expected one of {list(SECTION_FIELDS)}")
    converters = SECTION_FIELDS[section]
    if key not in converters:
        raise ConfigError(f"{section}.{key}", f"unknown key, expected one of {list(converters)}")
    try:
        return converters[key](value)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exp:
        raise ConfigError(f"{section}.{key}", f"cannot use value {value!r} ({exp})")


def apply_overrides(config: RunConfig, overrides: Dict[str, Any]) -> RunConfig:
    """
    Set dotted fields ("solver.beta", ...) of a config. Values are converted like file values, None values are
    skipped.

    :return: A new, unvalidated RunConfig.
    """
    changes: Dict[str, Dict[str, Any]] = {}
    for dotted, value in overrides.items():
        if value is None:
            continue
        section, __, key = dotted.partition(".")
        changes.setdefault(section, {})[key] = _convert(section, key, value)

    return replace(
        config, **{section: replace(getattr(config, section), **values) for section, values in changes.items()}
    )


def config_from_dict(data: Dict[str, Any], base: RunConfig = RunConfig()) -> RunConfig:
    """
    Build a RunConfig from a parsed configuration document. Fields the document leaves out keep their value in base.

    :raises ConfigError: If the document is not a run configuration, or names an unknown section or key.
    """
    if not isinstance(data, dict):
        raise ConfigError("format", "configuration must be a JSON object")
    if data.get("format") != CURRENT_FORMAT_NAME:
        raise ConfigError("format", f"must be {CURRENT_FORMAT_NAME!r}, got {data.get('format')!r}")
    if data.get("version") != CURRENT_FORMAT_VERSION:
        raise ConfigError("version", f"must be {CURRENT_FORMAT_VERSION}, got {data.get('version')!r}")

    overrides = {}
    for section, values in data.items():
        if section in ("format", "version"):
            continue
        if not isinstance(values, dict):
            raise ConfigError(section, "section must be a JSON object")
        if section not in SECTION_FIELDS:
            raise ConfigError(section, f"unknown section, expected one of {list(SECTION_FIELDS)}")
        overrides.update({f"{section}.{key}": value for key, value in values.items()})

    return apply_overrides(base, overrides)


def config_to_dict(config: RunConfig) -> Dict[str, Any]:
    """
    The configuration document of a RunConfig, readable by config_from_dict.
    """
    data: Dict[str, Any] = {"format": CURRENT_FORMAT_NAME, "version": CURRENT_FORMAT_VERSION}
    for section in SECTION_FIELDS:
        values = {}
        for item in fields(getattr(config, section)):
            if item.name not in SECTION_FIELDS[section]:
                continue
            value = getattr(getattr(config, section), item.name)
            if isinstance(value, PrecisionPolicy):
                value = value.name
            elif isinstance(value, tuple):
                value = list(value)
            values[item.name] = value
        data[section] = values
    return data


def load_config(path: Union[str, Path], base: RunConfig = RunConfig()) -> RunConfig:
    """
    Load a run configuration file.

    :param path: The path of the JSON document.
    :param base: The configuration supplying every field the file leaves out.
    :return: The RunConfig, not yet validated.
    """
    try:
        with Path(path).open("r") as f:
            data = json.load(f)
    except json.JSONDecodeError as exp:
        raise ConfigError("config", f"{path} is not valid JSON ({exp})")
    return config_from_dict(data, base)


def save_config(path: Union[str, Path], config: RunConfig):
    with Path(path).open("w") as f:
        json.dump(config_to_dict(config), f, indent=4)
