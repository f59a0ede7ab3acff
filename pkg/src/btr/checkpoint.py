"""Binary checkpoint container.

Layout::

    b"BTRCKPT\\0"                magic
    uint32 little-endian        format version
    uint64 little-endian        manifest length in bytes
    manifest                    UTF-8 JSON, sorted keys, no whitespace
    array payloads              raw little-endian bytes, in manifest order

The manifest holds free-form ``meta`` and, per array, its name, dtype, shape,
byte offset (relative to the payload start), length and CRC32. Arrays are
written in name order and nothing time-dependent is stored, so loading and
re-saving a checkpoint reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"BTRCKPT\0"
VERSION = 1
_HEADER = struct.Struct("<IQ")


class CheckpointError(ValueError):
    pass


def _canonical(arr) -> np.ndarray:
    a = np.asarray(arr)
    if a.dtype == object:
        raise CheckpointError("object arrays cannot be checkpointed")
    return np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<"))


def dumps(arrays: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    entries = []
    payload = []
    offset = 0
    for name in sorted(arrays):
        a = _canonical(arrays[name])
        raw = a.tobytes()
        entries.append(
            {
                "name": name,
                "dtype": a.dtype.str,
                "shape": list(a.shape),
                "offset": offset,
                "nbytes": len(raw),
                "crc32": zlib.crc32(raw),
            }
        )
        payload.append(raw)
        offset += len(raw)
    manifest = json.dumps({"arrays": entries, "meta": meta or {}}, sort_keys=True, separators=(",", ":"))
    mbytes = manifest.encode()
    return MAGIC + _HEADER.pack(VERSION, len(mbytes)) + mbytes + b"".join(payload)


def loads(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if not data.startswith(MAGIC):
        raise CheckpointError("not a checkpoint file (bad magic)")
    pos = len(MAGIC)
    if len(data) < pos + _HEADER.size:
        raise CheckpointError("checkpoint header is truncated")
    version, mlen = _HEADER.unpack_from(data, pos)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos += _HEADER.size
    try:
        manifest = json.loads(data[pos : pos + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"checkpoint manifest is corrupt: {exc}") from None
    base = pos + mlen
    arrays = {}
    for e in manifest["arrays"]:
        name = e["name"]
        start = base + e["offset"]
        raw = data[start : start + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"array {name!r} is truncated")
        if zlib.crc32(raw) != e["crc32"]:
            raise CheckpointError(f"array {name!r} failed its checksum")
        dtype = np.dtype(e["dtype"])
        shape = tuple(e["shape"])
        if int(np.prod(shape, dtype=np.int64)) * dtype.itemsize != e["nbytes"]:
            raise CheckpointError(f"array {name!r} has a shape/size mismatch")
        arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    return arrays, manifest["meta"]


def save(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(arrays, meta))
    tmp.replace(path)


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# torch state <-> arrays


def module_arrays(prefix: str, module) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def load_module(prefix: str, module, arrays: dict[str, np.ndarray]) -> None:
    import torch

    state = module.state_dict()
    new = {}
    for key, ref in state.items():
        name = f"{prefix}/{key}"
        if name not in arrays:
            raise CheckpointError(f"array {name!r} is missing")
        a = arrays[name]
        if tuple(a.shape) != tuple(ref.shape):
            raise CheckpointError(f"array {name!r} has shape {a.shape}, expected {tuple(ref.shape)}")
        new[key] = torch.from_numpy(a.copy()).to(ref.dtype)
    module.load_state_dict(new)


def optimizer_arrays(prefix: str, optimizer) -> tuple[dict[str, np.ndarray], dict]:
    sd = optimizer.state_dict()
    arrays = {}
    for idx, st in sd["state"].items():
        for k, v in st.items():
            arrays[f"{prefix}/{int(idx):05d}/{k}"] = v.detach().cpu().numpy().copy()
    return arrays, {"param_groups": sd["param_groups"]}


def load_optimizer(prefix: str, optimizer, arrays: dict[str, np.ndarray], meta: dict) -> None:
    import torch

    state: dict = {}
    for name, a in arrays.items():
        if not name.startswith(prefix + "/"):
            continue
        _, idx, key = name.split("/")
        state.setdefault(int(idx), {})[key] = torch.from_numpy(a.copy())
    groups = meta["param_groups"]
    optimizer.load_state_dict({"state": state, "param_groups": groups})
