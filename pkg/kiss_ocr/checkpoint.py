"""
The checkpoint file format. A checkpoint is a sequence of named records after a fixed header and is closed by a
CRC32 of all preceding bytes:

=========  ======================================================
magic      8 bytes, `KISSCKPT`
version    u32
count      u32, number of records
record     u16 name length, UTF-8 name, u8 dtype tag, u8 rank,
           rank x u64 dimensions, little-endian payload
crc        u32
=========  ======================================================

Model parameters are stored as `model/<name>`, the optimizer moments as `optimizer/exp_avg/<name>` and
`optimizer/exp_avg_sq/<name>`. The vocabulary, the run configuration and the training progress are stored as UTF-8
text in byte records below `meta/`.
"""

from __future__ import annotations

import logging
import zlib
from enum import Enum, unique
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .checkpoint_helper import (
    CheckpointError,
    CheckpointFormatError,
    CheckpointTruncatedError,
    pack_array,
    pack_payload,
    unpack_array,
    unpack_payload,
)
from .layers import Module
from .optim import OptimizerState
from .vocabulary import Vocabulary

MAGIC = b"KISSCKPT"
VERSION = 1

MODEL_PREFIX = "model/"
EXP_AVG_PREFIX = "optimizer/exp_avg/"
EXP_AVG_SQ_PREFIX = "optimizer/exp_avg_sq/"
VOCABULARY_RECORD = "meta/vocabulary"
CONFIG_RECORD = "meta/config"
STATE_RECORD = "meta/state"


class CheckpointShapeError(CheckpointError):
    """
    Raised if the tensors of a checkpoint do not fit the model
    """


@unique
class DType(Enum):
    FLOAT32 = 0
    UINT8 = 1

    @property
    def numpy_dtype(self) -> str:
        return {DType.FLOAT32: "float32", DType.UINT8: "uint8"}[self]


class Checkpoint(NamedTuple):
    tensors: dict[str, np.ndarray]
    vocabulary: Vocabulary
    config_text: str
    state: dict[str, str]

    def model_state(self) -> dict[str, np.ndarray]:
        return {
            name[len(MODEL_PREFIX) :]: tensor for name, tensor in self.tensors.items() if name.startswith(MODEL_PREFIX)
        }

    def optimizer_state(self, lr: float | None = None) -> OptimizerState:
        state = OptimizerState(step=int(self.state.get("step", 0)))
        if lr is not None:
            state.lr = lr
        elif "lr" in self.state:
            state.lr = float(self.state["lr"])
        for name, tensor in self.tensors.items():
            if name.startswith(EXP_AVG_PREFIX):
                state.exp_avg[name[len(EXP_AVG_PREFIX) :]] = tensor
            elif name.startswith(EXP_AVG_SQ_PREFIX):
                state.exp_avg_sq[name[len(EXP_AVG_SQ_PREFIX) :]] = tensor
        return state


def _text_record(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8)


def encode_records(records: dict[str, np.ndarray]) -> bytes:
    payload = pack_payload((MAGIC, VERSION, len(records)), "8s I I")
    for name, array in records.items():
        array = np.asarray(array)
        dtype = DType.UINT8 if array.dtype == np.uint8 else DType.FLOAT32
        encoded_name = name.encode("utf-8")
        payload += pack_payload((len(encoded_name), encoded_name, dtype.value, array.ndim), f"H {len(encoded_name)}s B B")
        if array.ndim:
            payload += pack_payload((array.shape,), f"{array.ndim}Q")
        payload += pack_array(array, dtype.numpy_dtype)
    return payload + pack_payload((zlib.crc32(payload),), "I")


def decode_records(data: bytes) -> dict[str, np.ndarray]:
    """
    Parse the records of a checkpoint and verify its checksum.

    Raises
    ------
    CheckpointFormatError
        If the magic, the version or the checksum are wrong
    CheckpointTruncatedError
        If the data ends in the middle of the header or a record
    """
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f"Invalid magic {data[:len(MAGIC)]!r}, expected {MAGIC!r}")
    (_, version, count), offset = unpack_payload(data, "8s I I")
    if version != VERSION:
        raise CheckpointFormatError(f"Unsupported checkpoint version {version}, expected {VERSION}")

    records = {}
    for _ in range(count):
        (name_length,), offset = unpack_payload(data, "H", offset)
        (name, tag, rank), offset = unpack_payload(data, f"{name_length}s B B", offset)
        try:
            dtype = DType(tag)
        except ValueError:
            raise CheckpointFormatError(f"Unknown dtype tag {tag} of record {name!r}") from None
        shape: tuple[int, ...] = ()
        if rank:
            (shape,), offset = unpack_payload(data, f"{rank}Q", offset)
        records[name.decode("utf-8")], offset = unpack_array(data, offset, tuple(shape), dtype.numpy_dtype)

    (crc,), end = unpack_payload(data, "I", offset)
    if end != len(data):
        raise CheckpointFormatError(f"{len(data) - end} unexpected bytes after the last record")
    if crc != zlib.crc32(data[:offset]):
        raise CheckpointFormatError("CRC mismatch, the checkpoint is corrupted")
    return records


def save_checkpoint(
    path: str | Path,
    model: Module,
    vocabulary: Vocabulary,
    config_text: str,
    optimizer_state: OptimizerState | None = None,
    state: dict[str, object] | None = None,
) -> Path:
    """
    Write the parameters, optimizer moments, vocabulary, configuration and training progress to `path`.
    """
    logger = logging.getLogger(__name__)
    records: dict[str, np.ndarray] = {f"{MODEL_PREFIX}{name}": value for name, value in model.state_dict().items()}
    progress = dict(state or {})
    if optimizer_state is not None:
        records.update({f"{EXP_AVG_PREFIX}{name}": value for name, value in optimizer_state.exp_avg.items()})
        records.update({f"{EXP_AVG_SQ_PREFIX}{name}": value for name, value in optimizer_state.exp_avg_sq.items()})
        progress.setdefault("step", optimizer_state.step)
        progress.setdefault("lr", repr(optimizer_state.lr))
    records[VOCABULARY_RECORD] = np.frombuffer(vocabulary.serialize(), dtype=np.uint8)
    records[CONFIG_RECORD] = _text_record(config_text)
    records[STATE_RECORD] = _text_record("".join(f"{key} = {value}\n" for key, value in progress.items()))

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_records(records))
    logger.info("Saved checkpoint with %i records to '%s'", len(records), path)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"Cannot read checkpoint '{path}': {exc}") from exc
    records = decode_records(data)
    for required in (VOCABULARY_RECORD, CONFIG_RECORD, STATE_RECORD):
        if required not in records:
            raise CheckpointFormatError(f"Checkpoint '{path}' has no '{required}' record")
    state = {}
    for line in records.pop(STATE_RECORD).tobytes().decode("utf-8").splitlines():
        key, _, value = line.partition("=")
        state[key.strip()] = value.strip()
    vocabulary = Vocabulary.deserialize(records.pop(VOCABULARY_RECORD).tobytes())
    config_text = records.pop(CONFIG_RECORD).tobytes().decode("utf-8")
    return Checkpoint(tensors=records, vocabulary=vocabulary, config_text=config_text, state=state)


def restore_model(checkpoint: Checkpoint, model: Module) -> None:
    """
    Copy the checkpoint parameters into `model`.

    Raises
    ------
    CheckpointShapeError
        If a parameter is missing or has a different shape. The message lists the offending tensors.
    """
    stored = checkpoint.model_state()
    expected = dict(model.named_parameters())
    problems = [f"{name}: missing" for name in expected if name not in stored]
    problems += [f"{name}: unexpected" for name in stored if name not in expected]
    problems += [
        f"{name}: checkpoint {stored[name].shape}, model {parameter.shape}"
        for name, parameter in expected.items()
        if name in stored and stored[name].shape != parameter.shape
    ]
    if problems:
        raise CheckpointShapeError("The checkpoint does not match the model: " + "; ".join(problems))
    model.load_state_dict(stored)
