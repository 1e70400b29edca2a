"""Atomic file writes and the raw tensor container used for video files."""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .autodiff import ContractError

TENSOR_MAGIC = b"EVTD"
TENSOR_VERSION = 1


def atomic_write(path, data: bytes) -> None:
    """Write via a sibling temp file and rename, so readers never see a torn file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_json(path, obj) -> None:
    atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def save_tensor_file(path, array: np.ndarray) -> None:
    """Header (magic, version, dtype tag, rank, dims) then little-endian payload."""
    array = np.asarray(array, dtype=np.float64)
    header = TENSOR_MAGIC + struct.pack("<III", TENSOR_VERSION, 1, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    atomic_write(path, header + array.astype("<f8").tobytes())


def load_tensor_file(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != TENSOR_MAGIC:
        raise ContractError(f"{path}: not a tensor file")
    version, dtype_tag, rank = struct.unpack_from("<III", buf, 4)
    if version != TENSOR_VERSION or dtype_tag != 1:
        raise ContractError(f"{path}: unsupported tensor file (version {version})")
    dims = struct.unpack_from(f"<{rank}I", buf, 16)
    count = int(np.prod(dims)) if rank else 1
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=16 + 4 * rank)
    return data.reshape(dims).copy()
