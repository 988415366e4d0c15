"""Self-describing checkpoint container.

Layout::

    8 bytes   magic  b"IPSFCKPT"
    4 bytes   format version, uint32 little-endian
    8 bytes   header length, uint64 little-endian
    header    UTF-8 JSON: configs, iteration, optimizer scalars, tensor index
    payload   raw little-endian tensor bytes, in index order

Each index entry holds ``name``, ``group`` (param, adam_m or adam_v),
``shape``, ``dtype`` (numpy type string) and ``offset``/``nbytes`` into the
payload.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

__all__ = ["MAGIC", "FORMAT_VERSION", "CheckpointError", "save_checkpoint", "load_checkpoint"]

MAGIC = b"IPSFCKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, *, model_config: dict, tensors: dict[str, dict[str, np.ndarray]],
                    iteration: int, train_config: dict | None = None, optimizer: dict | None = None) -> Path:
    """``tensors`` maps group name -> {tensor name -> array}."""
    index = []
    blobs = []
    offset = 0
    for group, named in tensors.items():
        for name, arr in named.items():
            arr = np.asarray(arr)
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            raw = np.ascontiguousarray(le).tobytes()
            index.append({
                "name": name,
                "group": group,
                "shape": list(arr.shape),
                "dtype": le.dtype.str,
                "offset": offset,
                "nbytes": len(raw),
            })
            blobs.append(raw)
            offset += len(raw)
    header = {
        "model_config": model_config,
        "train_config": train_config,
        "iteration": int(iteration),
        "optimizer": optimizer or {},
        "tensors": index,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> dict:
    """Return the header dict with an extra ``arrays`` key: group -> name -> array."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such checkpoint: {path}")
    buf = path.read_bytes()
    if len(buf) < _PREFIX.size:
        raise CheckpointError(f"{path}: file too short for a checkpoint")
    magic, version, head_len = _PREFIX.unpack_from(buf)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    start = _PREFIX.size
    try:
        header = json.loads(buf[start : start + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from None
    payload = memoryview(buf)[start + head_len :]
    arrays: dict[str, dict[str, np.ndarray]] = {}
    for entry in header["tensors"]:
        lo, n = entry["offset"], entry["nbytes"]
        if lo + n > len(payload):
            raise CheckpointError(f"{path}: tensor {entry['name']} runs past end of file")
        arr = np.frombuffer(payload[lo : lo + n], dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        arrays.setdefault(entry["group"], {})[entry["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    header["arrays"] = arrays
    return header
