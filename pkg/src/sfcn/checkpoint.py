"""Binary checkpoint format.

All integers are little-endian.  Layout::

    magic       8 bytes   b"SFCNCKPT"
    version     u32       1
    header_len  u32       length of the UTF-8 architecture header
    header      bytes     "key=value" lines (variant, input_size, width, ...)
    count       u32       number of parameter records
    record*:
        id_len  u32, id bytes (UTF-8, e.g. "conv1_1")
        role    u8        0 = weight, 1 = bias
        ndim    u32, then ndim x u32 extents
        value   prod(extents) x f64 (little-endian)
        momentum prod(extents) x f64

Records appear in store order, weight before bias.
"""

from __future__ import annotations

import struct
from typing import Optional

import numpy as np

from .layers import ParameterStore

MAGIC = b"SFCNCKPT"
VERSION = 1
ROLES = {"weight": 0, "bias": 1}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, store: ParameterStore, header: Optional[dict] = None) -> None:
    header_bytes = "".join(f"{k}={v}\n" for k, v in (header or {}).items()).encode("utf-8")
    records = []
    for pid, p in store.items():
        for role, value, _, mom in p.arrays():
            records.append((pid, role, value, mom))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header_bytes)))
        fh.write(header_bytes)
        fh.write(struct.pack("<I", len(records)))
        for pid, role, value, mom in records:
            idb = pid.encode("utf-8")
            fh.write(struct.pack("<I", len(idb)))
            fh.write(idb)
            fh.write(struct.pack("<BI", ROLES[role], value.ndim))
            fh.write(struct.pack(f"<{value.ndim}I", *value.shape))
            fh.write(value.astype("<f8").tobytes())
            fh.write(mom.astype("<f8").tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path):
    """Return ``(header dict, [(id, role, value, momentum), ...])``."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    header = {}
    for line in r.take(hlen).decode("utf-8").splitlines():
        k, _, v = line.partition("=")
        header[k] = v
    (count,) = r.unpack("<I")
    roles = {v: k for k, v in ROLES.items()}
    records = []
    for _ in range(count):
        (idlen,) = r.unpack("<I")
        pid = r.take(idlen).decode("utf-8")
        role, ndim = r.unpack("<BI")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape)) * 8
        value = np.frombuffer(r.take(size), dtype="<f8").reshape(shape).astype(np.float64)
        mom = np.frombuffer(r.take(size), dtype="<f8").reshape(shape).astype(np.float64)
        records.append((pid, roles[role], value, mom))
    if r.pos != len(r.data):
        raise CheckpointError(f"{path}: trailing bytes")
    return header, records


def load_into(store: ParameterStore, records) -> ParameterStore:
    """Copy checkpoint records into an existing store with matching ids and shapes."""
    for pid, role, value, mom in records:
        if pid not in store:
            raise CheckpointError(f"unknown parameter {pid!r}")
        p = store[pid]
        if role == "weight":
            target, target_mom = p.weight, p.mom_w
        else:
            if p.bias is None:
                raise CheckpointError(f"{pid!r} has no bias")
            target, target_mom = p.bias, p.mom_b
        if target.shape != value.shape:
            raise CheckpointError(f"{pid}.{role}: shape {value.shape} != {target.shape}")
        target[...] = value
        target_mom[...] = mom
    return store
