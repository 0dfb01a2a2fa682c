"""Flat single-file checkpoint format.

Layout: 4-byte magic ``RDO1``, a little-endian uint32 header length, a JSON
header (format version, configuration dict, tensor index), then the raw
tensor bytes. Floats are little-endian float32; counters are int64 and rng
states uint8. The header JSON is emitted with sorted keys and no whitespace
so save -> load -> save round-trips byte-identically.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"RDO1"
FORMAT_VERSION = 1

_DTYPES = {"<f4": "<f4", "<f8": "<f8", "<i8": "<i8", "|u1": "|u1"}


class CheckpointError(ValueError):
    """Raised on malformed files or name/shape/version mismatches."""


def _canonical_dtype(arr: np.ndarray) -> str:
    kind = arr.dtype.kind
    if kind == "f":
        code = "<f4" if arr.dtype.itemsize == 4 else "<f8"
    elif kind in "iu" and arr.dtype.itemsize == 1:
        code = "|u1"
    elif kind == "i":
        code = "<i8"
    elif kind == "b":
        code = "|u1"
    else:
        raise CheckpointError(f"unsupported dtype {arr.dtype}")
    return code


def save_tensors(path, tensors: dict[str, np.ndarray], config: dict | None = None) -> None:
    """Write named arrays plus a JSON-serializable config to one file."""
    path = Path(path)
    index = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        shape = list(arr.shape)  # before ascontiguousarray, which promotes 0-d
        code = _canonical_dtype(arr)
        arr = np.ascontiguousarray(arr.astype(np.dtype(code), copy=False))
        raw = arr.tobytes()
        index.append({"name": name, "dtype": code, "shape": shape,
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "config": config if config is not None else {},
        "tensors": index,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(head)))
        f.write(head)
        for raw in blobs:
            f.write(raw)
    tmp.replace(path)


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint file; returns (tensors, config)."""
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        (head_len,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(head_len).decode())
        version = header.get("format_version")
        if version != FORMAT_VERSION:
            raise CheckpointError(
                f"{path}: unsupported format_version {version!r} "
                f"(supported: {FORMAT_VERSION})"
            )
        blob = f.read()
    tensors = {}
    for entry in header["tensors"]:
        code = entry["dtype"]
        if code not in _DTYPES:
            raise CheckpointError(f"{path}: unknown dtype code {code!r}")
        start, nbytes = entry["offset"], entry["nbytes"]
        arr = np.frombuffer(blob[start:start + nbytes], dtype=np.dtype(code))
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return tensors, header["config"]


def require_exact_names(loaded: dict[str, np.ndarray],
                        expected: dict[str, tuple[int, ...]], context: str) -> None:
    """Validate that loaded tensor names and shapes match exactly."""
    missing = sorted(set(expected) - set(loaded))
    extra = sorted(set(loaded) - set(expected))
    if missing or extra:
        raise CheckpointError(
            f"{context}: name mismatch; missing={missing[:5]} unexpected={extra[:5]}"
        )
    for name, shape in expected.items():
        got = tuple(loaded[name].shape)
        if got != tuple(shape):
            raise CheckpointError(
                f"{context}: shape mismatch for {name}: file {got}, model {tuple(shape)}"
            )
