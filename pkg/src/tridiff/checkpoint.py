"""Versioned binary checkpoint container.

Layout (all integers little-endian):

  offset 0   4 bytes   magic b"TDCK"
  offset 4   u32       format version
  offset 8   u64       metadata length in bytes
  offset 16  ...       metadata, UTF-8 JSON (provenance, arch echo, rng state)
             u32       tensor count
  per tensor:
             u16       name length, then the UTF-8 name
             u8        dtype code (see _DTYPE_CODES)
             u8        rank
             u64 * r   dims
             u64       payload byte length
             ...       raw little-endian payload

Loading validates structure as it reads; a short or corrupt file raises
CheckpointCorruptError naming the byte offset where reading failed. A
file written by a newer format version is refused with a migration
error rather than read incorrectly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"TDCK"
FORMAT_VERSION = 1

_DTYPE_CODES = {"<f4": 0, "<f8": 1, "<i4": 2, "<i8": 3, "|u1": 4}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class CheckpointError(RuntimeError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    meta: dict
    arrays: dict[str, np.ndarray]
    version: int = FORMAT_VERSION
    path: Path | None = field(default=None, compare=False)


def _norm_tag(arr: np.ndarray) -> str:
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    tag = dt.str
    if tag == "=u1" or tag == "<u1":
        tag = "|u1"
    if tag not in _DTYPE_CODES:
        raise CheckpointError(f"unsupported dtype {arr.dtype} in checkpoint")
    return tag


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta_blob = json.dumps(ckpt.meta, sort_keys=True).encode("utf-8")
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", ckpt.version)
    out += struct.pack("<Q", len(meta_blob))
    out += meta_blob
    out += struct.pack("<I", len(ckpt.arrays))
    for name in sorted(ckpt.arrays):
        # not ascontiguousarray: that would silently promote rank-0 to rank 1
        arr = np.asarray(ckpt.arrays[name])
        tag = _norm_tag(arr)
        raw = arr.astype(tag).tobytes()
        nm = name.encode("utf-8")
        out += struct.pack("<H", len(nm))
        out += nm
        out += struct.pack("<BB", _DTYPE_CODES[tag], arr.ndim)
        for d in arr.shape:
            out += struct.pack("<Q", d)
        out += struct.pack("<Q", len(raw))
        out += raw
    path.write_bytes(bytes(out))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointCorruptError(
                f"truncated checkpoint: needed {n} bytes for {what} "
                f"at offset {self.pos}, file has {len(self.blob)}")
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u(self, fmt: str, what: str) -> int:
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))[0]


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    r = _Reader(path.read_bytes())
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointCorruptError(
            f"bad magic {magic!r} at offset 0 (expected {MAGIC!r})")
    version = r.u("<I", "version")
    if version > FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {version} is newer than supported "
            f"{FORMAT_VERSION}; migration required")
    meta_len = r.u("<Q", "metadata length")
    try:
        meta = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointCorruptError(
            f"corrupt metadata block ending at offset {r.pos}: {e}") from None
    n_tensors = r.u("<I", "tensor count")
    arrays: dict[str, np.ndarray] = {}
    for i in range(n_tensors):
        nm_len = r.u("<H", f"tensor {i} name length")
        name = r.take(nm_len, f"tensor {i} name").decode("utf-8")
        code = r.u("<B", f"tensor '{name}' dtype")
        if code not in _CODE_DTYPES:
            raise CheckpointCorruptError(
                f"unknown dtype code {code} for tensor '{name}' at offset {r.pos - 1}")
        rank = r.u("<B", f"tensor '{name}' rank")
        dims = tuple(r.u("<Q", f"tensor '{name}' dim {d}") for d in range(rank))
        nbytes = r.u("<Q", f"tensor '{name}' payload length")
        dtype = np.dtype(_CODE_DTYPES[code])
        expect = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
        if nbytes != expect:
            raise CheckpointCorruptError(
                f"tensor '{name}': payload length {nbytes} != shape {dims} "
                f"x itemsize (expected {expect}) at offset {r.pos - 8}")
        raw = r.take(nbytes, f"tensor '{name}' payload")
        arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(dims).copy()
    if r.pos != len(r.blob):
        raise CheckpointCorruptError(
            f"{len(r.blob) - r.pos} trailing bytes after offset {r.pos}")
    return Checkpoint(meta=meta, arrays=arrays, version=version, path=path)


def rng_state_json(gen: np.random.Generator) -> dict:
    """JSON-able snapshot of a Generator's bit-generator state."""

    def conv(x):
        if isinstance(x, dict):
            return {k: conv(v) for k, v in x.items()}
        if isinstance(x, np.ndarray):
            return {"__ndarray__": x.tolist(), "dtype": x.dtype.str}
        if isinstance(x, (np.integer,)):
            return int(x)
        return x

    return conv(gen.bit_generator.state)


def rng_state_restore(state: dict) -> np.random.Generator:
    def unconv(x):
        if isinstance(x, dict):
            if "__ndarray__" in x:
                return np.array(x["__ndarray__"], dtype=x["dtype"])
            return {k: unconv(v) for k, v in x.items()}
        return x

    raw = unconv(state)
    bg = getattr(np.random, raw["bit_generator"])()
    bg.state = raw
    return np.random.Generator(bg)
