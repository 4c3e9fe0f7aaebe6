"""Versioned named-tensor archive (``.m3ck``).

Layout, little-endian::

    magic "M3CK" | u32 version | 32-byte config fingerprint | u32 n_tensors
    n_tensors x ( u32 name_len | name utf-8 | u8 dtype tag | u32 rank
                  | rank x u64 dims | payload )

Tensors are written in sorted name order so identical state gives identical
bytes.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CHECKPOINT_MAGIC = b"M3CK"
CHECKPOINT_VERSION = 1

_DTYPES = {1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_TAGS = {np.dtype("float64"): 1, np.dtype("int64"): 2, np.dtype("uint8"): 3}


class CheckpointError(ValueError):
    pass


class FingerprintMismatch(CheckpointError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    fingerprint: str
    version: int = CHECKPOINT_VERSION

    def to_bytes(self) -> bytes:
        fp = bytes.fromhex(self.fingerprint)
        if len(fp) != 32:
            raise CheckpointError("fingerprint must be a SHA-256 hex digest")
        out = bytearray(CHECKPOINT_MAGIC + struct.pack("<I", self.version) + fp)
        out += struct.pack("<I", len(self.tensors))
        for name in sorted(self.tensors):
            arr = np.asarray(self.tensors[name])
            tag = _TAGS.get(arr.dtype)
            if tag is None:
                raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
            raw = name.encode()
            out += struct.pack("<I", len(raw)) + raw + struct.pack("<BI", tag, arr.ndim)
            out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
            out += np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
        return bytes(out)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        if buf[:4] != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic {bytes(buf[:4])!r}, expected {CHECKPOINT_MAGIC!r}")
        pos = 4

        def take(n):
            nonlocal pos
            if pos + n > len(buf):
                raise CheckpointError(f"truncated checkpoint at byte offset {pos}")
            chunk = buf[pos:pos + n]
            pos += n
            return chunk

        (version,) = struct.unpack("<I", take(4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        fp = take(32).hex()
        (count,) = struct.unpack("<I", take(4))
        tensors = {}
        for _ in range(count):
            (n,) = struct.unpack("<I", take(4))
            name = take(n).decode()
            tag, rank = struct.unpack("<BI", take(5))
            if tag not in _DTYPES:
                raise CheckpointError(f"unknown dtype tag {tag} for {name!r}")
            dims = struct.unpack(f"<{rank}Q", take(8 * rank))
            dt = _DTYPES[tag]
            size = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            arr = np.frombuffer(take(size), dtype=dt).reshape(dims)
            tensors[name] = arr.astype(dt.newbyteorder("="), copy=True)
        if pos != len(buf):
            raise CheckpointError(f"trailing bytes after byte offset {pos}")
        return cls(tensors, fp, version)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(ckpt.to_bytes())
    tmp.replace(path)


def load_checkpoint(path, fingerprint: str | None = None, force: bool = False) -> Checkpoint:
    ckpt = Checkpoint.from_bytes(Path(path).read_bytes())
    if fingerprint is not None and ckpt.fingerprint != fingerprint and not force:
        raise FingerprintMismatch(
            f"{path} was written for config {ckpt.fingerprint[:12]}, expected {fingerprint[:12]}")
    return ckpt


def text_tensor(s: str) -> np.ndarray:
    return np.frombuffer(s.encode(), dtype=np.uint8).copy()


def tensor_text(a: np.ndarray) -> str:
    return bytes(np.asarray(a, dtype=np.uint8)).decode()
