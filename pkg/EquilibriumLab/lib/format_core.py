"""
Shared pieces of the lab's binary file formats: fixed width unsigned integer encoding, exact reads, and the
StorageFormat base class every format implements.
"""

from abc import ABC, abstractmethod
from typing import Any, BinaryIO

from EquilibriumLab.lib.errors import FormatError


def to_bytes(num: int, length: int, byteorder: str = "little") -> bytes:
    """
    Pack a non-negative integer into a field of length bytes.

    :param num: The value of the field.
    :param length: The width of the field in bytes.
    :param byteorder: "little" (what the lab's formats use) or "big".
    :return: The packed field.
    """
    return int.to_bytes(num, length, byteorder)


def to_int(b: bytes, byteorder: str = "little") -> int:
    """
    Unpack a fixed width unsigned field written by to_bytes.
    """
    return int.from_bytes(b, byteorder)


def read_exact(in_file: BinaryIO, length: int) -> bytes:
    """
    Read exactly length bytes, raising a FormatError if the file ends first.
    """
    data = in_file.read(length)
    if len(data) != length:
        raise FormatError(f"Unexpected end of file, wanted {length} bytes but got {len(data)}")
    return data


class StorageFormat(ABC):
    """
    Abstract class for binary file formats of the lab. A format recognises its files by their leading magic bytes,
    and reads and writes one object per file.
    """

    __ERROR_MSG = "Subclass doesn't implement this method!!!"

    @classmethod
    @abstractmethod
    def check(cls, first_bytes: bytes) -> bool:
        """
        Compare the leading bytes of a file with this format's magic bytes.

        :param first_bytes: At least as many leading bytes of the file as the magic is long.
        :return: True if the file starts like a file of this format.
        """
        raise NotImplementedError(cls.__ERROR_MSG)

    @classmethod
    @abstractmethod
    def read(cls, in_file: BinaryIO) -> Any:
        """
        Decode one stored object, rejecting truncated or malformed data with a FormatError.
        """
        raise NotImplementedError(cls.__ERROR_MSG)

    @classmethod
    @abstractmethod
    def write(cls, obj: Any, out: BinaryIO):
        """
        Encode obj to the binary stream out. Equal objects always encode to identical bytes...

        :param obj: The object to store.
        :param out: A binary stream opened for writing.
        """
        raise NotImplementedError(cls.__ERROR_MSG)

    @classmethod
    @abstractmethod
    def get_identifier(cls) -> str:
        """
        The file extension of this format, without the dot.
        """
        raise NotImplementedError(cls.__ERROR_MSG)
