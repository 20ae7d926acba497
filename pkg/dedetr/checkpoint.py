"""
dedetr - Checkpoint persistence.

Binary layout, all integers little-endian:

    b"DEDT" | u32 version | u64 config length | config JSON (UTF-8)
    | u32 tensor count | per tensor: u32 name length, name (UTF-8),
    u32 rank, rank x u64 dims, row-major float32 data

The tensor-record half of the layout is shared with scene export.
"""

import io
import json
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Optional, Sequence

import numpy as np

from .errors import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b"DEDT"
VERSION = 1
MAX_RANK = 32


@dataclass
class Checkpoint:
    """Config mapping plus named parameter arrays (float32 as stored)."""
    config: dict
    tensors: dict           # name -> np.ndarray, insertion order preserved


def _read_exact(fh: BinaryIO, size: int, what: str) -> bytes:
    data = fh.read(size)
    if len(data) != size:
        raise CheckpointError(f"truncated file while reading {what}")
    return data


def _unpack(fh: BinaryIO, fmt: str, what: str) -> tuple:
    return struct.unpack(fmt, _read_exact(fh, struct.calcsize(fmt), what))


def write_tensor_records(fh: BinaryIO, records: Sequence[tuple]) -> None:
    """Write u32 count followed by (name, array) records."""
    fh.write(struct.pack("<I", len(records)))
    for name, array in records:
        raw_name = name.encode("utf-8")
        arr = np.ascontiguousarray(array, dtype="<f4")
        fh.write(struct.pack("<I", len(raw_name)))
        fh.write(raw_name)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def read_tensor_records(fh: BinaryIO) -> dict:
    """
    Inverse of write_tensor_records; arrays come back as float32.

    Raises:
        CheckpointError: Truncated data, or a rank or dims field that does
            not describe the bytes that follow
    """
    (count,) = _unpack(fh, "<I", "tensor count")
    tensors = {}
    for i in range(count):
        (name_len,) = _unpack(fh, "<I", f"name length of tensor {i}")
        try:
            name = _read_exact(fh, name_len, f"name of tensor {i}").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"tensor {i} name is not UTF-8") from exc
        (rank,) = _unpack(fh, "<I", f"rank of '{name}'")
        if rank > MAX_RANK:
            raise CheckpointError(f"tensor '{name}' has rank {rank}, limit is {MAX_RANK}")
        try:
            dims = _unpack(fh, f"<{rank}Q", f"dims of '{name}'") if rank else ()
            raw = _read_exact(fh, 4 * math.prod(dims), f"data of '{name}'")
            tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
        except (ValueError, OverflowError, MemoryError, struct.error) as exc:
            raise CheckpointError(f"malformed record for tensor '{name}': {exc}") from exc
    return tensors


def encode_checkpoint(config: dict, tensors: dict) -> bytes:
    buf = io.BytesIO()
    raw_config = json.dumps(config, sort_keys=True).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack("<Q", len(raw_config)))
    buf.write(raw_config)
    write_tensor_records(buf, list(tensors.items()))
    return buf.getvalue()


def decode_checkpoint(data: bytes) -> Checkpoint:
    fh = io.BytesIO(data)
    magic = fh.read(len(MAGIC))
    if magic != MAGIC:
        raise CheckpointError(f"bad magic bytes {magic!r}, expected {MAGIC!r}")
    (version,) = _unpack(fh, "<I", "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (config_len,) = _unpack(fh, "<Q", "config length")
    try:
        config = json.loads(_read_exact(fh, config_len, "config").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"embedded config is not valid JSON: {exc}") from exc
    tensors = read_tensor_records(fh)
    if fh.read(1):
        raise CheckpointError("trailing bytes after the last tensor record")
    return Checkpoint(config, tensors)


def save_checkpoint(path, model, config: Optional[dict] = None) -> Path:
    """
    Write model parameters and the run configuration.

    Args:
        path: Destination file
        model: Anything with state_dict() (or a plain name -> array dict)
        config: JSON-serialisable config mapping

    Returns:
        The written path
    """
    tensors = model if isinstance(model, dict) else model.state_dict()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(config or {}, tensors))
    logger.info("checkpoint written: %s (%d tensors)", path, len(tensors))
    return path


def load_checkpoint(path, model=None) -> Checkpoint:
    """
    Read a checkpoint, optionally loading its parameters into model.

    Raises:
        CheckpointError: Unreadable, truncated or malformed file
        ShapeError: Tensor shapes differ from the model's parameters
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    ckpt = decode_checkpoint(data)
    if model is not None:
        model.load_state_dict(ckpt.tensors)
    logger.debug("checkpoint loaded: %s (%d tensors)", path, len(ckpt.tensors))
    return ckpt
