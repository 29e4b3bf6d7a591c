"""Checkpoint container: JSON header plus a little-endian float32 blob.

Layout::

    b"ECGLCKPT"            8-byte magic
    uint64 (LE)            header length in bytes
    header                 UTF-8 JSON: {"format", "meta", "tensors": [...]}
    blob                   tensors back to back, little-endian float32

Every tensor entry records ``name``, ``shape``, ``offset`` and ``nbytes``
relative to the start of the blob.  Writing is deterministic (sorted JSON
keys, no timestamps) so identical state gives byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"ECGLCKPT"
FORMAT = 1


def save_checkpoint(path, tensors: dict, meta: dict | None = None) -> str:
    """Write ``tensors`` and ``meta``; returns the file's SHA-256 hex digest."""
    entries, chunks, offset = [], [], 0
    for name, value in tensors.items():
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().numpy()
        arr = np.ascontiguousarray(value, dtype="<f4")
        data = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = json.dumps({"format": FORMAT, "meta": meta or {}, "tensors": entries},
                        sort_keys=True, separators=(",", ":")).encode()
    payload = MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)
    return hashlib.sha256(payload).hexdigest()


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + n])
    if header.get("format") != FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {header.get('format')}")
    blob = raw[16 + n:]
    tensors = {}
    for e in header["tensors"]:
        buf = blob[e["offset"]:e["offset"] + e["nbytes"]]
        tensors[e["name"]] = np.frombuffer(buf, dtype="<f4").reshape(e["shape"]).astype(np.float32)
    return tensors, header["meta"]


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def module_arrays(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().float().numpy() for k, v in module.state_dict().items()}


def load_module_arrays(module: torch.nn.Module, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
    state = module.state_dict()
    converted = {k: torch.as_tensor(v, dtype=state[k].dtype) for k, v in arrays.items() if k in state}
    module.load_state_dict(converted, strict=strict)
