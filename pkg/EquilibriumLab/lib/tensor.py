"""
Tensor Package:
Provides the core value carrier of the library, an immutable dense array with an explicit element precision, plus
the precision policy used by the reversible solver...
"""

from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Tuple, Union

import numpy as np

from EquilibriumLab.lib.errors import ConfigError


class Precision(Enum):
    """
    The element precisions a Tensor may carry.
    """

    SINGLE = "single"
    DOUBLE = "double"

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float32) if self is Precision.SINGLE else np.dtype(np.float64)

    @property
    def bits(self) -> int:
        return self.dtype.itemsize * 8

    @classmethod
    def parse(cls, value: Union[str, "Precision"]) -> "Precision":
        """
        Convert a string ("single", "double", "float32" or "float64") into a Precision.

        :param value: The string or Precision to convert.
        :return: The matching Precision, raises a ConfigError if unknown...
        """
        if isinstance(value, Precision):
            return value

        aliases = {"single": cls.SINGLE, "float32": cls.SINGLE, "double": cls.DOUBLE, "float64": cls.DOUBLE}

        if value not in aliases:
            raise ConfigError("precision", f"must be one of {sorted(aliases)}, got {value!r}")

        return aliases[value]


class Tensor:
    """
    Dense numeric array with an explicit precision. Tensors are immutable once constructed: the backing array is
    marked read-only, so a Tensor may be shared freely between solves...
    """

    __slots__ = ("_data", "_precision")

    def __init__(self, data: Union[np.ndarray, Iterable, float], precision: Union[str, Precision] = Precision.DOUBLE):
        """
        Create a new Tensor, copying the passed data.

        :param data: Anything numpy can turn into an array of reals.
        :param precision: The element precision, double by default.
        """
        self._precision = Precision.parse(precision)
        array = np.array(data, dtype=self._precision.dtype, copy=True)
        array.setflags(write=False)
        self._data = array

    @classmethod
    def wrap(cls, array: np.ndarray) -> "Tensor":
        """
        Wrap an array produced by a primitive without copying it. The precision is taken from the array's dtype.
        """
        tensor = cls.__new__(cls)
        tensor._precision = Precision.SINGLE if array.dtype == np.float32 else Precision.DOUBLE
        array = np.asarray(array, dtype=tensor._precision.dtype)
        array.setflags(write=False)
        tensor._data = array
        return tensor

    @classmethod
    def zeros(cls, shape: Tuple[int, ...], precision: Union[str, Precision] = Precision.DOUBLE) -> "Tensor":
        precision = Precision.parse(precision)
        return cls.wrap(np.zeros(shape, dtype=precision.dtype))

    @classmethod
    def zeros_like(cls, other: "Tensor") -> "Tensor":
        return cls.zeros(other.shape, other.precision)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self._data.shape

    @property
    def precision(self) -> Precision:
        return self._precision

    @property
    def size(self) -> int:
        return int(self._data.size)

    @property
    def ndim(self) -> int:
        return self._data.ndim

    def numpy(self) -> np.ndarray:
        """
        Get the read-only array backing this Tensor.
        """
        return self._data

    def item(self) -> float:
        return float(self._data.item())

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self._data)))

    def __len__(self) -> int:
        return self.shape[0]

    def __repr__(self) -> str:
        return f"Tensor({self._data.tolist()!r}, precision={self._precision.value})"


@dataclass(frozen=True)
class PrecisionPolicy:
    """
    Precision used for function evaluation (compute) and for the add/subtract/divide steps of the reversible
    scheme (accumulate). Accumulation must be at least as wide as compute...
    """

    compute: Precision = Precision.DOUBLE
    accumulate: Precision = Precision.DOUBLE

    def __post_init__(self):
        object.__setattr__(self, "compute", Precision.parse(self.compute))
        object.__setattr__(self, "accumulate", Precision.parse(self.accumulate))

        if self.accumulate.bits < self.compute.bits:
            raise ConfigError(
                "precision_policy",
                f"accumulate precision ({self.accumulate.value}) must be at least as wide as compute precision "
                f"({self.compute.value})",
            )

    @property
    def name(self) -> str:
        if self.compute is self.accumulate:
            return self.compute.value
        return "mixed"

    @classmethod
    def parse(cls, name: Union[str, "PrecisionPolicy"]) -> "PrecisionPolicy":
        """
        Build a policy from its name: "double", "single" or "mixed" (single compute, double accumulate).
        """
        if isinstance(name, PrecisionPolicy):
            return name
        if name == "mixed":
            return cls(Precision.SINGLE, Precision.DOUBLE)
        if name in ("double", "single"):
            return cls(Precision.parse(name), Precision.parse(name))

        raise ConfigError("precision_policy", f"must be one of ['double', 'mixed', 'single'], got {name!r}")
