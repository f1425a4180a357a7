import json
from dataclasses import replace
from io import BytesIO

import numpy as np
import pytest

from EquilibriumLab.lib.checkpoint_format import (
    Checkpoint,
    CheckpointFormat,
    checkpoint_from_state,
    checkpoint_path,
    load_checkpoint,
    save_checkpoint,
    state_from_checkpoint,
)
from EquilibriumLab.lib.equilibrium import flatten_parameters
from EquilibriumLab.lib.errors import ConfigError, FormatError
from EquilibriumLab.lib.results import OUT_DIR_ENV, format_value, read_csv, rows_to_csv, write_csv
from EquilibriumLab.lib.run_config import (
    CURRENT_FORMAT_NAME,
    RunConfig,
    apply_overrides,
    config_from_dict,
    config_to_dict,
    load_config,
    save_config,
)
from EquilibriumLab.lib.solvers import SolverConfig
from EquilibriumLab.lib.tensor import Precision, PrecisionPolicy, Tensor
from EquilibriumLab.lib.training import TrainTask, train

TASK = TrainTask(samples=32, width=4, hidden=6, steps=6, batch_size=16, patience=2)
SOLVER = SolverConfig(beta=0.5, max_steps=2, stop_rule="fixed_steps")


def _checkpoint_bytes(checkpoint: Checkpoint) -> bytes:
    buffer = BytesIO()
    CheckpointFormat.write(checkpoint, buffer)
    return buffer.getvalue()


def test_format_value():
    assert format_value(True) == "true"
    assert format_value(0.1) == "0.1"
    assert format_value(None) == ""
    assert format_value(3) == "3"
    assert float(format_value(1 / 3)) == 1 / 3


def test_rows_to_csv_uses_column_order():
    text = rows_to_csv([{"b": 1, "a": 0.5, "c": None}], columns=("a", "b", "c"))
    assert text == "a,b,c\n0.5,1,\n"


def test_write_csv_resolves_against_out_dir(tmp_path, monkeypatch):
    monkeypatch.setenv(OUT_DIR_ENV, str(tmp_path))
    path = write_csv("rows.csv", [{"N": 1, "converged": False}])

    assert path == tmp_path / "rows.csv"
    assert read_csv(path) == [{"N": "1", "converged": "false"}]
    assert [p.name for p in tmp_path.iterdir()] == ["rows.csv"]


def test_checkpoint_save_load_save_is_identical(tmp_path):
    result = train(TASK, "reversible", SOLVER)
    checkpoint = checkpoint_from_state(result.state, TASK, "reversible")

    path = tmp_path / "run.eqck"
    save_checkpoint(path, checkpoint)
    loaded = load_checkpoint(path)

    assert loaded.step == 6
    assert list(loaded.tensors) == list(checkpoint.tensors)
    assert _checkpoint_bytes(loaded) == path.read_bytes()


def test_checkpoint_keeps_precision():
    checkpoint = Checkpoint({"w": Tensor([[1.5, 2.5]], Precision.SINGLE), "s": Tensor(3.0)}, step=1)
    loaded = CheckpointFormat.read(BytesIO(_checkpoint_bytes(checkpoint)))

    assert loaded.tensors["w"].precision is Precision.SINGLE
    assert loaded.tensors["w"].shape == (1, 2)
    assert loaded.tensors["s"].shape == ()


def test_malformed_checkpoints_are_rejected():
    data = _checkpoint_bytes(Checkpoint({"w": Tensor([1.0, 2.0])}, step=0))

    assert CheckpointFormat.check(data)
    for broken in (b"NOPE" + data[4:], data[:-3], data + b"\x00", data[:4] + b"\x02\x00\x00\x00" + data[8:]):
        with pytest.raises(FormatError):
            CheckpointFormat.read(BytesIO(broken))


def test_resume_is_bit_identical(tmp_path):
    full = train(TASK, "reversible", SOLVER)

    first = train(replace(TASK, steps=3), "reversible", SOLVER)
    path = tmp_path / "half.eqck"
    save_checkpoint(path, checkpoint_from_state(first.state, TASK, "reversible"))
    resumed = train(TASK, "reversible", SOLVER, state_from_checkpoint(load_checkpoint(path), TASK))

    assert first.rows + resumed.rows == full.rows
    assert np.array_equal(
        flatten_parameters(resumed.state.model.parameters()), flatten_parameters(full.state.model.parameters())
    )


def test_invalid_sampler_state_is_a_format_error():
    checkpoint = checkpoint_from_state(train(replace(TASK, steps=1), "reversible", SOLVER).state, TASK, "reversible")
    checkpoint.rng_state = {"bit_generator": "Unknown"}
    with pytest.raises(FormatError):
        state_from_checkpoint(checkpoint, TASK)


def test_checkpoint_from_another_model_is_a_format_error():
    checkpoint = checkpoint_from_state(train(replace(TASK, steps=1), "reversible", SOLVER).state, TASK, "reversible")

    with pytest.raises(FormatError) as info:
        state_from_checkpoint(checkpoint, replace(TASK, width=TASK.width + 1))
    assert "shape" in str(info.value)

    del checkpoint.tensors["readout.b"]
    with pytest.raises(FormatError) as info:
        state_from_checkpoint(checkpoint, TASK)
    assert "readout.b" in str(info.value)


def test_checkpoint_extension_is_added_when_missing(tmp_path):
    checkpoint = checkpoint_from_state(train(replace(TASK, steps=1), "reversible", SOLVER).state, TASK, "reversible")

    assert checkpoint_path(tmp_path / "run") == tmp_path / "run.eqck"
    assert checkpoint_path(tmp_path / "run.bin") == tmp_path / "run.bin"
    assert save_checkpoint(tmp_path / "run", checkpoint) == tmp_path / "run.eqck"
    assert load_checkpoint(tmp_path / "run").step == 1


def test_config_round_trip(tmp_path):
    config = apply_overrides(
        RunConfig(),
        {
            "solver.beta": 0.5,
            "solver.precision_policy": "mixed",
            "experiment.betas": "0.5:0.7:0.1",
            "experiment.seeds": [4, 5],
            "train.lr": 0.25,
            "run.adjoint_steps": 12,
            "run.cell": "diag:0.5:3",
        },
    )
    path = tmp_path / "run.json"
    save_config(path, config)

    assert load_config(path) == config
    assert config.experiment.betas == (0.5, 0.6, 0.7)
    assert config.solver.precision_policy == PrecisionPolicy(Precision.SINGLE, Precision.DOUBLE)
    assert config_from_dict(config_to_dict(RunConfig())) == RunConfig()


def test_spec_and_adjoint_config():
    config = apply_overrides(RunConfig(), {"solver.tol": 1e-8, "run.adjoint_steps": 5})

    assert config.spec("accuracy").kind == "accuracy"
    assert config.spec("accuracy").tol == 1e-8
    assert config.adjoint_config() == config.solver.replace(beta=1.0, max_steps=5, stop_rule="fixed_steps")
    assert RunConfig().adjoint_config() is None


@pytest.mark.parametrize(
    "document,key",
    [
        ({"format": "other", "version": 1}, "format"),
        ({"format": CURRENT_FORMAT_NAME, "version": 9}, "version"),
        ({"format": CURRENT_FORMAT_NAME, "version": 1, "plot": {}}, "plot"),
        ({"format": CURRENT_FORMAT_NAME, "version": 1, "solver": {"gamma": 1}}, "solver.gamma"),
        ({"format": CURRENT_FORMAT_NAME, "version": 1, "solver": {"max_steps": 2.5}}, "solver.max_steps"),
        ({"format": CURRENT_FORMAT_NAME, "version": 1, "experiment": {"betas": "1:0:1"}}, "experiment.betas"),
    ],
)
def test_config_errors(document, key):
    with pytest.raises(ConfigError) as info:
        config_from_dict(document)
    assert info.value.key == key


def test_invalid_json_config(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError) as info:
        load_config(path)
    assert info.value.key == "config"


def test_saved_config_is_readable_json(tmp_path):
    path = tmp_path / "defaults.json"
    save_config(path, RunConfig())
    data = json.loads(path.read_text())

    assert data["format"] == CURRENT_FORMAT_NAME
    assert data["solver"]["precision_policy"] == "double"
    assert set(data) == {"format", "version", "solver", "experiment", "train", "run"}
