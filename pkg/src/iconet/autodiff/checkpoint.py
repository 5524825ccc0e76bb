"""Checkpoint container.

Layout (all header lines are ASCII, ``\\n`` terminated)::

    ICONET-CHECKPOINT
    version 1
    meta <key> <value>            zero or more, value runs to end of line
    tensor <name> <f32|f64> <d0,d1,...|scalar>
    ...
    end
    <raw little-endian payloads, in header order>

Saving what was loaded reproduces the file byte for byte.
"""

from __future__ import annotations

import os
from typing import Mapping

import numpy as np

MAGIC = "ICONET-CHECKPOINT"
VERSION = 1
_CODES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


def _check_token(kind: str, s: str) -> None:
    if not s or any(c.isspace() for c in s):
        raise CheckpointError(f"{kind} '{s}' must be non-empty and free of whitespace")


def encode_checkpoint(tensors: Mapping[str, np.ndarray], meta: Mapping[str, object] | None = None) -> bytes:
    lines = [MAGIC, f"version {VERSION}"]
    for key, value in (meta or {}).items():
        _check_token("meta key", key)
        value = str(value)
        if "\n" in value:
            raise CheckpointError(f"meta value for '{key}' contains a newline")
        lines.append(f"meta {key} {value}")
    payload = []
    for name, arr in tensors.items():
        _check_token("tensor name", name)
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise CheckpointError(f"tensor '{name}' has unsupported dtype {arr.dtype}")
        code = _CODES[arr.dtype]
        shape = ",".join(str(n) for n in arr.shape) if arr.ndim else "scalar"
        lines.append(f"tensor {name} {code} {shape}")
        payload.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    lines.append("end")
    return ("\n".join(lines) + "\n").encode("ascii") + b"".join(payload)


def decode_checkpoint(blob: bytes):
    """Return ``(tensors, meta)``; meta values come back as strings."""
    pos = 0

    def readline():
        nonlocal pos
        end = blob.find(b"\n", pos)
        if end < 0:
            raise CheckpointError("truncated checkpoint header")
        line = blob[pos:end].decode("ascii", errors="replace")
        pos = end + 1
        return line

    if readline() != MAGIC:
        raise CheckpointError("not an ICONet checkpoint (bad magic)")
    version = readline()
    if version != f"version {VERSION}":
        raise CheckpointError(f"unsupported checkpoint {version!r}")
    meta, table = {}, []
    while True:
        line = readline()
        if line == "end":
            break
        kind, _, rest = line.partition(" ")
        if kind == "meta":
            key, _, value = rest.partition(" ")
            meta[key] = value
        elif kind == "tensor":
            parts = rest.split(" ")
            if len(parts) != 3 or parts[1] not in _DTYPES:
                raise CheckpointError(f"malformed tensor line {line!r}")
            shape = () if parts[2] == "scalar" else tuple(int(n) for n in parts[2].split(","))
            table.append((parts[0], _DTYPES[parts[1]], shape))
        else:
            raise CheckpointError(f"unexpected header line {line!r}")
    tensors = {}
    for name, dtype, shape in table:
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if pos + nbytes > len(blob):
            raise CheckpointError(f"payload for '{name}' is truncated")
        arr = np.frombuffer(blob, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos).reshape(shape)
        tensors[name] = arr.astype(dtype.newbyteorder("="))
        pos += nbytes
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes after payload")
    return tensors, meta


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], meta: Mapping[str, object] | None = None) -> None:
    blob = encode_checkpoint(tensors, meta)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
