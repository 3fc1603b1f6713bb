"""Binary tensor blobs and the versioned checkpoint container.

Tensor blob (little-endian): magic ``PDSET1``, u32 rank, u32 extents, then
raw float32 values in row-major order. Checkpoints are a magic + format
integer + JSON manifest (config echo and the parameter name/shape table)
followed by the tensor blobs concatenated in manifest order; serialization is
canonical, so save -> load -> save reproduces the bytes exactly.
"""

from __future__ import annotations

import io
import json
from pathlib import Path

import numpy as np

TENSOR_MAGIC = b"PDSET1"
CHECKPOINT_MAGIC = b"PDSECKPT"
CHECKPOINT_VERSION = 1


def write_tensor(fh, array: np.ndarray) -> None:
    """Write one blob; values are stored as float32 (the training precision)."""
    arr = np.ascontiguousarray(np.asarray(array), dtype="<f4")
    fh.write(TENSOR_MAGIC)
    fh.write(np.array([arr.ndim], dtype="<u4").tobytes())
    fh.write(np.array(arr.shape, dtype="<u4").tobytes())
    fh.write(arr.tobytes())


def read_tensor(fh) -> np.ndarray:
    magic = fh.read(len(TENSOR_MAGIC))
    if magic != TENSOR_MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    rank = int(np.frombuffer(fh.read(4), dtype="<u4")[0])
    shape = tuple(int(v) for v in np.frombuffer(fh.read(4 * rank), dtype="<u4"))
    count = int(np.prod(shape)) if shape else 1
    data = fh.read(4 * count)
    if len(data) != 4 * count:
        raise ValueError("truncated tensor blob")
    return np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float32)


def save_tensor_file(path, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, array)


def load_tensor_file(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def save_checkpoint(path, state: dict, config: dict, extra: dict | None = None) -> None:
    """Persist a name -> array state table with its config echo."""
    Path(path).write_bytes(checkpoint_bytes(state, config, extra))


def load_checkpoint(path) -> tuple:
    """Return (state dict, config dict, extra dict)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (magic {magic!r})")
        version, blob_len = (int(v) for v in np.frombuffer(fh.read(8), dtype="<u4"))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: checkpoint format {version} unsupported (expected {CHECKPOINT_VERSION})")
        manifest = json.loads(fh.read(blob_len).decode())
        state = {}
        for entry in manifest["parameters"]:
            arr = read_tensor(fh)
            if list(arr.shape) != list(entry["shape"]):
                raise ValueError(f"{path}: blob shape {arr.shape} mismatches manifest {entry['shape']}")
            state[entry["name"]] = arr
    return state, manifest["config"], manifest.get("extra", {})


def checkpoint_bytes(state: dict, config: dict, extra: dict | None = None) -> bytes:
    buf = io.BytesIO()
    names = list(state.keys())
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "config": config,
        "parameters": [{"name": n, "shape": list(np.shape(state[n]))} for n in names],
        "extra": extra or {},
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(np.array([CHECKPOINT_VERSION, len(blob)], dtype="<u4").tobytes())
    buf.write(blob)
    for n in names:
        write_tensor(buf, state[n])
    return buf.getvalue()
