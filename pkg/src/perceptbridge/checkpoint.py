"""Bit-exact binary checkpoint format.

Layout: magic "PLBK" | u32 LE version=1 | u32 tensor count | per tensor:
u32 name length, UTF-8 name, u8 dtype (0=f32, 1=f64), u32 rank,
rank x u64 extents, raw little-endian element data.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"PLBK"
VERSION = 1

_DTYPE_TO_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(IOError):
    """Malformed file, version mismatch, or name mismatch on load."""


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named tensors; round-trips bit-exactly via load_checkpoint."""
    seen = set()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(tensors)))
        for name, arr in tensors.items():
            if name in seen:
                raise CheckpointError(f"duplicate tensor name {name!r}")
            seen.add(name)
            arr = np.asarray(arr)
            if arr.dtype not in _DTYPE_TO_CODE:
                raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", _DTYPE_TO_CODE[arr.dtype]))
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def _read_exact(f, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint: wanted {n} bytes, got {len(buf)}")
    return buf


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        if _read_exact(f, 4) != MAGIC:
            raise CheckpointError("bad magic bytes: not a checkpoint file")
        version, count = struct.unpack("<II", _read_exact(f, 8))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(f, 4))
            name = _read_exact(f, name_len).decode("utf-8")
            if name in out:
                raise CheckpointError(f"duplicate tensor name {name!r} in file")
            (code,) = struct.unpack("<B", _read_exact(f, 1))
            if code not in _CODE_TO_DTYPE:
                raise CheckpointError(f"unknown dtype code {code} for {name!r}")
            (rank,) = struct.unpack("<I", _read_exact(f, 4))
            shape = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank)) if rank else ()
            dtype = _CODE_TO_DTYPE[code]
            n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
            if rank == 0:
                n_bytes = dtype.itemsize
            data = np.frombuffer(_read_exact(f, n_bytes), dtype=dtype).reshape(shape)
            out[name] = data.astype(dtype.newbyteorder("="), copy=True)
        return out


def state_dict(module) -> dict[str, np.ndarray]:
    """Snapshot a Module's Variables keyed by their assigned names."""
    state = {}
    for path, var in module.variables():
        name = var.name if var.name is not None else path
        if name in state:
            raise CheckpointError(f"duplicate variable name {name!r}")
        state[name] = var.data.copy()
    return state


def load_state(module, state: dict[str, np.ndarray]) -> None:
    """Load tensors into a Module; unknown or missing names are errors."""
    own = {}
    for path, var in module.variables():
        own[var.name if var.name is not None else path] = var
    missing = sorted(set(own) - set(state))
    extra = sorted(set(state) - set(own))
    if missing or extra:
        raise CheckpointError(
            f"state mismatch: missing from file {missing}, unknown in file {extra}"
        )
    for name, var in own.items():
        arr = state[name]
        if tuple(arr.shape) != tuple(var.shape):
            raise CheckpointError(
                f"shape mismatch for {name!r}: file {arr.shape} vs model {var.shape}"
            )
        var.data = arr.astype(var.dtype, copy=True)
