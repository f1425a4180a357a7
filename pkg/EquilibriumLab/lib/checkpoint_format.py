"""
The lab's checkpoint format. A checkpoint holds the named parameter tensors of a model, the optimizer state, the
step counter and the state of the batch sampler, so a training run can be resumed bit for bit...
"""

import json
from dataclasses import dataclass, field
from io import BytesIO
from pathlib import Path
from typing import Any, BinaryIO, Dict, Union

import numpy as np

from EquilibriumLab.lib.errors import FormatError
from EquilibriumLab.lib.format_core import StorageFormat, read_exact, to_bytes, to_int
from EquilibriumLab.lib.results import write_atomic
from EquilibriumLab.lib.tensor import Precision, Tensor
from EquilibriumLab.lib.training import TrainState, TrainTask


@dataclass
class Checkpoint:
    tensors: Dict[str, Tensor]
    step: int
    optimizer: Dict[str, Any] = field(default_factory=dict)
    rng_state: Dict[str, Any] = field(default_factory=dict)
    metadata: Dict[str, Any] = field(default_factory=dict)


class CheckpointFormat(StorageFormat):
    """
    Layout, all integers little endian and unsigned:

        "EQCK" magic, 4 byte version,
        4 byte length + UTF-8 JSON header {"metadata", "optimizer", "rng_state", "step"} (sorted keys),
        4 byte tensor count, then per tensor:
            2 byte name length + UTF-8 name, 1 byte element size (4 single, 8 double), 1 byte ndim,
            4 bytes per dimension, raw little endian elements in C order.

    Tensors are stored in insertion order, so writing a loaded checkpoint reproduces the file byte for byte.
    """

    MAGIC = b"EQCK"
    VERSION = 1

    @classmethod
    def check(cls, first_bytes: bytes) -> bool:
        return first_bytes[:4] == cls.MAGIC

    @classmethod
    def _assert(cls, boolean, msg="Malformed checkpoint!!!"):
        """Private, used for throwing exceptions when assertions don't hold while reading the format."""
        if not boolean:
            raise FormatError(msg)

    @classmethod
    def read(cls, in_file: BinaryIO) -> Checkpoint:
        """
        Read a checkpoint from the specified file buffer.

        :param in_file: The file buffer with checkpoint data.
        :return: The Checkpoint.
        """
        cls._assert(cls.check(read_exact(in_file, 4)), "Not a checkpoint file!!!")
        version = to_int(read_exact(in_file, 4))
        cls._assert(version == cls.VERSION, f"Unsupported checkpoint version {version}!")

        try:
            header = json.loads(read_exact(in_file, to_int(read_exact(in_file, 4))).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exp:
            raise FormatError(f"Malformed checkpoint header: {exp}")
        cls._assert(isinstance(header, dict) and "step" in header, "Checkpoint header is missing the step!")

        tensors = {}
        for __ in range(to_int(read_exact(in_file, 4))):
            name = read_exact(in_file, to_int(read_exact(in_file, 2))).decode("utf-8")
            item_size = to_int(read_exact(in_file, 1))
            cls._assert(item_size in (4, 8), f"Invalid element size {item_size} for tensor '{name}'!")
            ndim = to_int(read_exact(in_file, 1))
            shape = tuple(to_int(read_exact(in_file, 4)) for __ in range(ndim))
            precision = Precision.SINGLE if item_size == 4 else Precision.DOUBLE
            count = int(np.prod(shape, dtype=np.int64))
            data = np.frombuffer(read_exact(in_file, count * item_size), dtype=precision.dtype.newbyteorder("<"))
            tensors[name] = Tensor(data.reshape(shape), precision)

        cls._assert(in_file.read(1) == b"", "Trailing data after the last tensor!")
        return Checkpoint(
            tensors,
            header["step"],
            header.get("optimizer", {}),
            header.get("rng_state", {}),
            header.get("metadata", {}),
        )

    @classmethod
    def write(cls, obj: Checkpoint, out: BinaryIO):
        """
        Write a checkpoint to the specified file.

        :param obj: The Checkpoint to store.
        :param out: The binary file to write to.
        """
        header = {"metadata": obj.metadata, "optimizer": obj.optimizer, "rng_state": obj.rng_state, "step": obj.step}
        header_data = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")

        out.write(cls.MAGIC)
        out.write(to_bytes(cls.VERSION, 4))
        out.write(to_bytes(len(header_data), 4))
        out.write(header_data)
        out.write(to_bytes(len(obj.tensors), 4))

        for name, tensor in obj.tensors.items():
            name_data = name.encode("utf-8")
            array = tensor.numpy()
            out.write(to_bytes(len(name_data), 2))
            out.write(name_data)
            out.write(to_bytes(array.dtype.itemsize, 1))
            out.write(to_bytes(array.ndim, 1))
            for dim in array.shape:
                out.write(to_bytes(dim, 4))
            out.write(np.ascontiguousarray(array, dtype=array.dtype.newbyteorder("<")).tobytes())

    @classmethod
    def get_identifier(cls) -> str:
        return "eqck"


def checkpoint_path(path: Union[str, Path]) -> Path:
    """
    The path a checkpoint is stored at: path itself, or path with the format's extension when it has none.
    """
    path = Path(path)
    return path if path.suffix else path.with_suffix("." + CheckpointFormat.get_identifier())


def save_checkpoint(path: Union[str, Path], checkpoint: Checkpoint) -> Path:
    """
    Write a checkpoint atomically.

    :return: The path written, see checkpoint_path.
    """
    path = checkpoint_path(path)
    buffer = BytesIO()
    CheckpointFormat.write(checkpoint, buffer)
    write_atomic(path, buffer.getvalue())
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    with checkpoint_path(path).open("rb") as f:
        return CheckpointFormat.read(f)


def checkpoint_from_state(state: TrainState, task: TrainTask, engine: str) -> Checkpoint:
    """
    Capture a training state. The task and engine are kept as metadata.
    """
    metadata = {"engine": engine, "task": dict(vars(task))}
    return Checkpoint(
        state.model.parameters(), state.step, state.optimizer_state(), state.rng.bit_generator.state, metadata
    )


def state_from_checkpoint(checkpoint: Checkpoint, task: TrainTask) -> TrainState:
    """
    Rebuild the training state stored in a checkpoint, for a run of task.

    :raises FormatError: If the stored tensors are not the parameters of the task's model (names and shapes), or the
                         sampler state is invalid.
    """
    fresh = task.make_model(task.make_dataset())
    expected = fresh.parameters()
    for name, tensor in expected.items():
        if name not in checkpoint.tensors:
            raise FormatError(f"Checkpoint has no tensor {name!r}")
        if checkpoint.tensors[name].shape != tensor.shape:
            raise FormatError(
                f"Checkpoint tensor {name!r} has shape {checkpoint.tensors[name].shape}, the model needs {tensor.shape}"
            )
    unknown = sorted(set(checkpoint.tensors) - set(expected))
    if unknown:
        raise FormatError(f"Checkpoint has tensors the model does not know: {unknown}")

    model = fresh.with_parameters(checkpoint.tensors)
    rng = np.random.default_rng()
    try:
        rng.bit_generator.state = checkpoint.rng_state
    except (TypeError, ValueError, KeyError) as exp:
        raise FormatError(f"Checkpoint has an invalid sampler state: {exp}")

    optimizer = checkpoint.optimizer
    return TrainState(
        model,
        checkpoint.step,
        optimizer.get("lr", task.lr),
        rng,
        optimizer.get("best_window_loss", float("inf")),
        list(optimizer.get("window", [])),
        optimizer.get("nfe_cumulative", 0),
    )
