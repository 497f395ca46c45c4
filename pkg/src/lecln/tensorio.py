"""Binary tensor files and checkpoint directories.

Layout (little-endian)::

    b"LECL"  magic
    u16      version (1)
    u16      rank
    u32[rank] dims
    u16      dtype tag: 0 = f32, 1 = complex (interleaved re/im f32)
    payload  row-major values

A checkpoint is a directory with ``manifest.json`` (parameter names, shapes,
epoch, optimizer state file names, config hash) and one tensor file per
parameter.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

MAGIC = b"LECL"
VERSION = 1
DTYPE_F32, DTYPE_C64 = 0, 1


class TensorFormatError(ValueError):
    pass


class ConfigHashMismatch(RuntimeError):
    pass


def encode(arr) -> bytes:
    arr = np.asarray(arr)
    if np.iscomplexobj(arr):
        tag = DTYPE_C64
        payload = np.ascontiguousarray(arr, dtype="<c8").tobytes()
    else:
        tag = DTYPE_F32
        payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    head = MAGIC + struct.pack("<HH", VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + struct.pack("<H", tag) + payload


def decode(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise TensorFormatError("bad magic: not a LECL tensor file")
    version, rank = struct.unpack_from("<HH", buf, 4)
    if version != VERSION:
        raise TensorFormatError(f"unsupported tensor file version {version}")
    off = 8
    dims = struct.unpack_from(f"<{rank}I", buf, off)
    off += 4 * rank
    (tag,) = struct.unpack_from("<H", buf, off)
    off += 2
    if tag == DTYPE_F32:
        dtype = np.dtype("<f4")
    elif tag == DTYPE_C64:
        dtype = np.dtype("<c8")
    else:
        raise TensorFormatError(f"unknown dtype tag {tag}")
    count = int(np.prod(dims)) if rank else 1
    if len(buf) - off != count * dtype.itemsize:
        raise TensorFormatError(f"payload size {len(buf) - off} does not match dims {dims}")
    return np.frombuffer(buf, dtype=dtype, count=count, offset=off).reshape(dims).copy()


def write_tensor(path, arr) -> None:
    Path(path).write_bytes(encode(arr))


def read_tensor(path) -> np.ndarray:
    return decode(Path(path).read_bytes())


def _adam_to_files(adam, root: Path) -> Optional[dict]:
    if adam is None:
        return None
    for i, (m, v) in enumerate(zip(adam.m, adam.v)):
        write_tensor(root / f"adam_m_{i}.lecl", m.detach().cpu().numpy())
        write_tensor(root / f"adam_v_{i}.lecl", v.detach().cpu().numpy())
    return {"t": adam.t, "count": len(adam.m)}


def save_checkpoint(directory, params: Mapping, *, config_hash: str, epoch: int, adam=None,
                    extra: Optional[dict] = None) -> Path:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, t in params.items():
        arr = t.detach().cpu().numpy() if hasattr(t, "detach") else np.asarray(t)
        fname = f"{name}.lecl"
        write_tensor(root / fname, arr)
        entries.append({"name": name, "shape": list(arr.shape), "file": fname})
    manifest = {
        "format": "LECL-checkpoint",
        "version": VERSION,
        "config_hash": config_hash,
        "epoch": epoch,
        "params": entries,
        "adam": _adam_to_files(adam, root),
        "extra": extra or {},
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return root


def load_checkpoint(directory, expect_hash: Optional[str] = None) -> dict:
    """Read a checkpoint; returns a dict with ``params`` (name -> ndarray), ``epoch``, ``adam``, ``extra``."""
    import torch

    from .nn import AdamState

    root = Path(directory)
    manifest = json.loads((root / "manifest.json").read_text())
    if expect_hash is not None and manifest["config_hash"] != expect_hash:
        raise ConfigHashMismatch(
            f"checkpoint {root} was written with config {manifest['config_hash'][:12]}, "
            f"current config is {expect_hash[:12]}")
    params = {}
    for e in manifest["params"]:
        arr = read_tensor(root / e["file"])
        if list(arr.shape) != e["shape"]:
            raise TensorFormatError(f"{e['file']}: shape {arr.shape} != manifest {e['shape']}")
        params[e["name"]] = arr
    adam = None
    if manifest.get("adam"):
        n = manifest["adam"]["count"]
        adam = AdamState(m=[torch.from_numpy(read_tensor(root / f"adam_m_{i}.lecl")) for i in range(n)],
                         v=[torch.from_numpy(read_tensor(root / f"adam_v_{i}.lecl")) for i in range(n)],
                         t=manifest["adam"]["t"])
    return {"params": params, "epoch": manifest["epoch"], "adam": adam, "extra": manifest["extra"],
            "config_hash": manifest["config_hash"]}
