"""Versioned binary checkpoint format for named parameter tensors.

Layout: magic ``b"TSDC"``, u32 version, u32 tensor count; then per tensor:
u32 name length + utf-8 name, u8 dtype tag (0=f32, 1=f64), u8 rank,
u32 dims, raw little-endian payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"TSDC"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(IOError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray], config: dict[str, str] | None = None) -> None:
    """Write named tensors; an optional ``<path>.cfg`` sidecar makes it self-describing."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            if arr.dtype not in _TAGS:
                raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<BB", _TAGS[arr.dtype], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[_TAGS[arr.dtype]]).tobytes())
    if config is not None:
        with open(path.with_suffix(path.suffix + ".cfg"), "w", encoding="utf-8") as fh:
            for key in sorted(config):
                fh.write(f"{key} = {config[key]}\n")


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        version, count = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            tag, rank = struct.unpack("<BB", fh.read(2))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
            dtype = _DTYPES.get(tag)
            if dtype is None:
                raise CheckpointError(f"{path}: unknown dtype tag {tag}")
            n_bytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if dims else dtype.itemsize
            payload = fh.read(n_bytes)
            if len(payload) != n_bytes:
                raise CheckpointError(f"{path}: truncated payload for tensor {name!r}")
            tensors[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
    return tensors


def load_checkpoint_config(path) -> dict[str, str]:
    cfg_path = Path(path).with_suffix(Path(path).suffix + ".cfg")
    if not cfg_path.exists():
        raise CheckpointError(f"missing checkpoint config sidecar {cfg_path}")
    out: dict[str, str] = {}
    for line in cfg_path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def average_checkpoints(paths) -> dict[str, np.ndarray]:
    """Element-wise mean of parameters across checkpoints with identical names/shapes."""
    if not paths:
        raise CheckpointError("no checkpoints to average")
    loaded = [load_checkpoint(p) for p in paths]
    names = list(loaded[0])
    for p, other in zip(paths[1:], loaded[1:]):
        if list(other) != names:
            raise CheckpointError(f"checkpoint {p} has mismatched tensor names")
    out = {}
    for name in names:
        stack = [ckpt[name] for ckpt in loaded]
        for p, arr in zip(paths, stack):
            if arr.shape != stack[0].shape:
                raise CheckpointError(f"checkpoint {p}: shape mismatch for {name!r}")
        out[name] = np.mean(np.stack([a.astype(np.float64) for a in stack]), axis=0).astype(
            stack[0].dtype
        )
    return out
