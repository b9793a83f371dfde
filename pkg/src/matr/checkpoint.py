"""Binary checkpoint container.

Layout (all little-endian)::

    8 bytes   magic  b"MATRCKPT"
    u32       format version
    u32       header length H
    H bytes   UTF-8 JSON header: {"config": ..., "meta": ..., "tensors": [[name, shape], ...]}
    payload   float64 data of every tensor, in header order, row-major
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MATRCKPT"
VERSION = 1
_HEAD = struct.Struct("<8sII")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays, config=None, meta=None):
    """Write ``arrays`` (name -> ndarray) plus JSON ``config``/``meta``.

    The file is written to a temporary name and renamed, so an interrupted
    save never clobbers the previous checkpoint.
    """
    names = sorted(arrays)
    header = {
        "config": config or {},
        "meta": meta or {},
        "tensors": [[n, list(np.shape(arrays[n]))] for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEAD.pack(MAGIC, VERSION, len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path):
    """Return ``(arrays, config, meta)``."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEAD.size:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic, version, hlen = _HEAD.unpack_from(raw, 0)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint format version {version}, expected {VERSION}")
    header = json.loads(raw[_HEAD.size:_HEAD.size + hlen])
    off = _HEAD.size + hlen
    arrays = {}
    for name, shape in header["tensors"]:
        n = int(np.prod(shape)) if shape else 1
        end = off + 8 * n
        if end > len(raw):
            raise CheckpointError(f"{path}: payload truncated at tensor {name!r}")
        arrays[name] = np.frombuffer(raw[off:end], dtype="<f8").reshape(shape).astype(np.float64)
        off = end
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return arrays, header["config"], header["meta"]
