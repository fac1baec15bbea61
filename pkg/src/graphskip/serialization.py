"""Binary tensor records and checkpoint/manifest I/O.

Record layout (one tensor): magic "ATNS", u8 version, u8 dtype code
(0 = f32, 1 = f64), u32 rank, rank x u64 extents, little-endian C-order
payload.  A file may hold several records back to back; the accompanying JSON
manifest carries the names and order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import BinaryIO, List, Sequence

import numpy as np

from .errors import ManifestError

MAGIC = b"ATNS"
VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_MAX_RANK = 8


def write_record(fh: BinaryIO, arr: np.ndarray) -> None:
    """Append one tensor record to an open binary stream."""
    arr = np.ascontiguousarray(arr)
    code = _DTYPE_CODES.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise ManifestError(f"unsupported dtype {arr.dtype}; only f32/f64 records exist")
    fh.write(MAGIC)
    fh.write(struct.pack("<BBI", VERSION, code, arr.ndim))
    for extent in arr.shape:
        fh.write(struct.pack("<Q", extent))
    fh.write(arr.astype(_CODE_DTYPES[code], copy=False).tobytes(order="C"))


def read_record(fh: BinaryIO) -> np.ndarray:
    """Read one tensor record; raises ManifestError on any malformed header."""
    magic = fh.read(4)
    if magic != MAGIC:
        raise ManifestError(f"bad magic {magic!r}, expected {MAGIC!r}")
    header = fh.read(6)
    if len(header) != 6:
        raise ManifestError("truncated record header")
    version, code, rank = struct.unpack("<BBI", header)
    if version != VERSION:
        raise ManifestError(f"unsupported record version {version}")
    if code not in _CODE_DTYPES:
        raise ManifestError(f"unknown dtype code {code}")
    if rank > _MAX_RANK:
        raise ManifestError(f"rank {rank} exceeds limit {_MAX_RANK}")
    raw = fh.read(8 * rank)
    if len(raw) != 8 * rank:
        raise ManifestError("truncated extents")
    shape = struct.unpack(f"<{rank}Q", raw) if rank else ()
    dtype = _CODE_DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    payload = fh.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise ManifestError("truncated payload")
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
    return arr.astype(dtype.newbyteorder("="), copy=True)


def save_tensors(path, arrays: Sequence[np.ndarray]) -> None:
    """Write a list of tensors as consecutive records."""
    with open(path, "wb") as fh:
        for arr in arrays:
            write_record(fh, arr)


def load_tensors(path) -> List[np.ndarray]:
    """Read consecutive records until end of file."""
    out = []
    with open(path, "rb") as fh:
        while fh.read(1):
            fh.seek(-1, 1)
            out.append(read_record(fh))
    return out


def write_manifest(path, payload: dict) -> None:
    """Write a manifest as canonical JSON (sorted keys, trailing newline)."""
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    Path(path).write_text(text, encoding="utf-8")


def read_manifest(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc


def save_checkpoint(directory, model, extra: dict | None = None,
                    optimizer=None) -> None:
    """Write params.atns (+ state/opt records) and a manifest into directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    named = model.named_parameters()
    save_tensors(directory / "params.atns", [t.data for _, t in named])
    state_names, state_arrays = model.named_state()
    save_tensors(directory / "state.atns", state_arrays)
    manifest = {
        "format": "atns-checkpoint",
        "version": 1,
        "param_names": [name for name, _ in named],
        "param_shapes": [list(t.shape) for _, t in named],
        "state_names": state_names,
        "dtype": str(np.dtype(named[0][1].dtype)) if named else "float32",
    }
    if optimizer is not None:
        opt_arrays, opt_meta = optimizer.state_arrays()
        save_tensors(directory / "opt.atns", opt_arrays)
        manifest["optimizer"] = opt_meta
    if extra:
        manifest.update(extra)
    write_manifest(directory / "manifest.json", manifest)


def load_checkpoint(directory, model, optimizer=None) -> dict:
    """Restore parameters (and optionally optimizer state); returns the manifest."""
    directory = Path(directory)
    manifest = read_manifest(directory / "manifest.json")
    if manifest.get("format") != "atns-checkpoint":
        raise ManifestError(f"{directory} is not a checkpoint directory")
    named = model.named_parameters()
    if manifest["param_names"] != [name for name, _ in named]:
        raise ManifestError("checkpoint parameter names do not match the model")
    arrays = load_tensors(directory / "params.atns")
    if len(arrays) != len(named):
        raise ManifestError(f"expected {len(named)} records, found {len(arrays)}")
    for (name, tensor), arr in zip(named, arrays):
        if tuple(arr.shape) != tensor.shape:
            raise ManifestError(f"shape mismatch for {name}: "
                                f"{arr.shape} vs {tensor.shape}")
        tensor.data = arr.astype(tensor.dtype, copy=False)
    state_names, state_arrays = model.named_state()
    if manifest.get("state_names") != state_names:
        raise ManifestError("checkpoint state names do not match the model")
    saved_state = load_tensors(directory / "state.atns")
    model.load_state(saved_state)
    if optimizer is not None:
        if "optimizer" not in manifest:
            raise ManifestError("checkpoint has no optimizer state to resume from")
        optimizer.load_state_arrays(load_tensors(directory / "opt.atns"),
                                    manifest["optimizer"])
    return manifest
