"""Parameter checkpoint files.

Layout: 8-byte magic ``MADCKPT1``, little-endian uint64 header length,
UTF-8 JSON header, then the raw little-endian float64 payloads at the
byte offsets (relative to the payload start) listed in the header.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .optim import ParamGroup

MAGIC = b"MADCKPT1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, groups: Iterable[ParamGroup], meta: dict[str, Any] | None = None) -> None:
    entries = []
    payloads = []
    offset = 0
    for group in groups:
        for name, t in group:
            buf = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
            entries.append({"name": name, "shape": list(t.shape), "role": group.role,
                            "offset": offset, "nbytes": len(buf)})
            payloads.append(buf)
            offset += len(buf)
    header = json.dumps({"format": "mad-dg-checkpoint", "version": 1, "tensors": entries,
                         "meta": meta or {}}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for buf in payloads:
            fh.write(buf)


def read_checkpoint(path) -> tuple[dict[str, Any], dict[str, tuple[str, np.ndarray]]]:
    """Return (header, {name: (role, array)})."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC or len(raw) < 16:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    base = 16 + hlen
    tensors = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        chunk = raw[start:start + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise CheckpointError(f"{path}: truncated payload for {e['name']}")
        arr = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(e["shape"])
        tensors[e["name"]] = (e["role"], arr)
    return header, tensors


def load_into(path, groups: Iterable[ParamGroup]) -> dict[str, Any]:
    """Copy stored values into matching parameters; returns the header meta."""
    header, tensors = read_checkpoint(path)
    for group in groups:
        for name, t in group:
            if name not in tensors:
                raise CheckpointError(f"{path}: missing parameter {name}")
            role, arr = tensors[name]
            if arr.shape != t.shape or role != group.role:
                raise CheckpointError(f"{path}: parameter {name} has shape/role {arr.shape}/{role}, "
                                      f"expected {t.shape}/{group.role}")
            t.data = arr.copy()
    return header["meta"]
