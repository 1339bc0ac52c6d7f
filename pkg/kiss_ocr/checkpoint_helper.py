"""
Little-endian struct helpers for the checkpoint records. Format strings are space separated struct codes, one code
per value, e.g. `"8s I I"`.
"""

from __future__ import annotations

import struct
from typing import Any

import numpy as np


class CheckpointError(ValueError):
    """
    Raised if a checkpoint cannot be read or does not match the model
    """


class CheckpointFormatError(CheckpointError):
    """
    Raised if the magic bytes, the version or the checksum of a checkpoint are wrong
    """


class CheckpointTruncatedError(CheckpointError):
    """
    Raised if a checkpoint ends in the middle of a record
    """


def pack_payload(data: tuple[Any, ...], form: str) -> bytes:
    """
    Pack one value per format code. Codes with a count (`3Q`) take a sequence, `s` codes take bytes.
    """
    packed = b""
    for format_str, value in zip(form.split(" "), data):
        if "s" in format_str:
            packed += struct.pack("<" + format_str, value)
        elif len(format_str) > 1:
            packed += struct.pack("<" + format_str, *value)
        else:
            packed += struct.pack("<" + format_str, value)
    return packed


def unpack_payload(data: bytes, form: str, offset: int = 0) -> tuple[list[Any], int]:
    """
    Unpack the values described by `form` starting at `offset`.

    Returns
    -------
    tuple of list and int
        The values and the offset of the first byte after them. Codes with a count yield a tuple, `s` codes yield
        bytes.

    Raises
    ------
    CheckpointTruncatedError
        If the data ends before all values are read
    """
    values: list[Any] = []
    for format_str in form.split(" "):
        struct_format_str = "<" + format_str
        length = struct.calcsize(struct_format_str)
        if offset + length > len(data):
            raise CheckpointTruncatedError(
                f"Expected {length} bytes at offset {offset}, but only {len(data) - offset} remain"
            )
        data_unpacked = struct.unpack_from(struct_format_str, data, offset)
        offset += length
        if "s" in format_str or len(format_str) == 1:
            values.append(data_unpacked[0])
        else:
            values.append(data_unpacked)
    return values, offset


def pack_array(array: np.ndarray, dtype: str) -> bytes:
    return np.ascontiguousarray(array, dtype=np.dtype(dtype).newbyteorder("<")).tobytes()


def unpack_array(data: bytes, offset: int, shape: tuple[int, ...], dtype: str) -> tuple[np.ndarray, int]:
    item = np.dtype(dtype).newbyteorder("<")
    length = int(np.prod(shape, dtype=np.int64)) * item.itemsize
    if offset + length > len(data):
        raise CheckpointTruncatedError(
            f"Expected a payload of {length} bytes at offset {offset}, but only {len(data) - offset} remain"
        )
    array = np.frombuffer(data, dtype=item, count=length // item.itemsize, offset=offset)
    return array.reshape(shape).astype(np.dtype(dtype).newbyteorder("="), copy=True), offset + length
