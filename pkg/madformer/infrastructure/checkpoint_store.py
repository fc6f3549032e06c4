"""Checkpoints as single binary files on the local filesystem.

Layout (all integers little-endian):

    magic        4 bytes   b"MADF"
    version      u32       FORMAT_VERSION
    digest       64 bytes  ascii hex sha256 of the run configuration
    step         u64
    meta_len     u32
    metadata     meta_len bytes of utf-8 JSON
    n_tensors    u32
    n_tensors times:
        name_len u16
        name     name_len bytes utf-8, "<group>/<tensor name>"
        ndim     u8
        shape    ndim x u32
        data     prod(shape) x float32 ('<f4'), row-major
"""

import json
import logging
import os
import struct
from pathlib import Path
from typing import BinaryIO, Self

import numpy as np
import torch

from madformer.errors import CheckpointError, NotFoundError
from madformer.ports import Checkpoint, CheckpointStore

logger = logging.getLogger(__name__)

MAGIC = b"MADF"
FORMAT_VERSION = 1
SUFFIX = ".madf"


def _read_exact(stream: BinaryIO, size: int) -> bytes:
    data = stream.read(size)
    if len(data) != size:
        raise CheckpointError(f"checkpoint is truncated: wanted {size} bytes, got {len(data)}")
    return data


def _unpack(stream: BinaryIO, fmt: str) -> tuple:
    return struct.unpack(fmt, _read_exact(stream, struct.calcsize(fmt)))


def _read_text(stream: BinaryIO, size: int, encoding: str, what: str) -> str:
    try:
        return _read_exact(stream, size).decode(encoding)
    except UnicodeDecodeError as e:
        raise CheckpointError(f"checkpoint {what} is corrupt: {e}") from e


def write_checkpoint(stream: BinaryIO, checkpoint: Checkpoint) -> None:
    digest = checkpoint.config_digest.encode("ascii")
    if len(digest) != 64:
        raise CheckpointError(f"config digest must be 64 hex characters, got {len(digest)}")
    metadata = json.dumps(checkpoint.metadata, sort_keys=True).encode("utf-8")
    tensors = [
        (f"{group}/{name}", tensor)
        for group, table in checkpoint.tensors.items()
        for name, tensor in table.items()
    ]

    stream.write(MAGIC)
    stream.write(struct.pack("<I", FORMAT_VERSION))
    stream.write(digest)
    stream.write(struct.pack("<QI", checkpoint.step, len(metadata)))
    stream.write(metadata)
    stream.write(struct.pack("<I", len(tensors)))
    for name, tensor in tensors:
        encoded = name.encode("utf-8")
        array = tensor.detach().cpu().to(torch.float32).numpy()
        stream.write(struct.pack("<H", len(encoded)))
        stream.write(encoded)
        stream.write(struct.pack(f"<B{array.ndim}I", array.ndim, *array.shape))
        stream.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def read_checkpoint(stream: BinaryIO) -> Checkpoint:
    """
    Raises:
        CheckpointError: On a wrong magic, an unknown version, undecodable text or
            truncated data
    """
    magic = _read_exact(stream, 4)
    if magic != MAGIC:
        raise CheckpointError(f"not a checkpoint file: magic {magic!r}")
    (version,) = _unpack(stream, "<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    digest = _read_text(stream, 64, "ascii", "digest")
    step, meta_len = _unpack(stream, "<QI")
    try:
        metadata = json.loads(_read_exact(stream, meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"checkpoint metadata is corrupt: {e}") from e

    tensors: dict[str, dict[str, torch.Tensor]] = {}
    (count,) = _unpack(stream, "<I")
    for _ in range(count):
        (name_len,) = _unpack(stream, "<H")
        group, _, name = _read_text(stream, name_len, "utf-8", "tensor name").partition("/")
        (ndim,) = _unpack(stream, "<B")
        shape = _unpack(stream, f"<{ndim}I") if ndim else ()
        size = int(np.prod(shape, dtype=np.int64))
        array = np.frombuffer(_read_exact(stream, 4 * size), dtype="<f4").reshape(shape)
        tensors.setdefault(group, {})[name] = torch.from_numpy(array.astype(np.float32))
    return Checkpoint(step=step, config_digest=digest, metadata=metadata, tensors=tensors)


class LocalCheckpointStore(CheckpointStore):
    """One file per label under a directory."""

    def __init__(self: Self, root: Path):
        self.root = Path(root)

    def _path(self: Self, label: str) -> Path:
        return self.root / f"{label}{SUFFIX}"

    def save(self: Self, label: str, checkpoint: Checkpoint) -> None:
        path = self._path(label)
        partial = path.with_suffix(SUFFIX + ".partial")
        try:
            os.makedirs(self.root, exist_ok=True)
            with open(partial, "wb") as file:
                write_checkpoint(file, checkpoint)
            os.replace(partial, path)
        except OSError as e:
            raise CheckpointError(f"could not write checkpoint {path}: {e}") from e
        logger.debug("saved checkpoint label=%s step=%d", label, checkpoint.step)

    def load(self: Self, label: str) -> Checkpoint:
        path = self._path(label)
        try:
            with open(path, "rb") as file:
                return read_checkpoint(file)
        except FileNotFoundError as e:
            raise NotFoundError(f"no checkpoint named {label} in {self.root}") from e
        except OSError as e:
            raise CheckpointError(f"could not read checkpoint {path}: {e}") from e

    def labels(self: Self) -> list[str]:
        if not self.root.is_dir():
            return []
        return sorted(path.name[: -len(SUFFIX)] for path in self.root.glob(f"*{SUFFIX}"))

    def delete(self: Self, label: str) -> None:
        path = self._path(label)
        try:
            path.unlink(missing_ok=True)
        except OSError as e:
            raise CheckpointError(f"could not remove checkpoint {path}: {e}") from e
        logger.debug("removed checkpoint label=%s", label)
