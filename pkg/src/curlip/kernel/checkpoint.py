"""Single-file checkpoint format.

Layout::

    b"CURLIP01"
    uint64 little-endian header length
    UTF-8 JSON header {config, meta, step_count, params: [{name, dtype, shape, offset, trainable}]}
    raw little-endian float32 tensors in manifest order

Optimizer moments are stored as extra manifest entries named
``opt.m/<param>`` and ``opt.v/<param>``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import CheckpointError
from .state import ModelState, Param

MAGIC = b"CURLIP01"
_M, _V = "opt.m/", "opt.v/"


def to_bytes(state: ModelState, meta: dict | None = None) -> bytes:
    entries: list[tuple[str, np.ndarray, bool]] = []
    for name, p in state.params.items():
        entries.append((name, p.data, p.trainable))
    for name, (m, v) in state.opt_moments.items():
        entries.append((_M + name, m, False))
        entries.append((_V + name, v, False))

    manifest, blobs, offset = [], [], 0
    for name, arr, trainable in entries:
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append({"name": name, "dtype": "float32", "shape": list(arr.shape),
                         "offset": offset, "trainable": trainable})
        blobs.append(raw)
        offset += len(raw)
    header = {"config": state.config, "meta": meta or {}, "step_count": state.step_count,
              "params": manifest}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(blobs)


def from_bytes(buf: bytes) -> tuple[ModelState, dict]:
    if buf[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack("<Q", buf[8:16])
    header = json.loads(buf[16:16 + hlen].decode("utf-8"))
    data = memoryview(buf)[16 + hlen:]
    state = ModelState(config=header["config"], step_count=header["step_count"], dtype=np.float32)
    moments: dict[str, dict[str, np.ndarray]] = {}
    for entry in header["params"]:
        if entry["dtype"] != "float32":
            raise CheckpointError(f"unsupported dtype {entry['dtype']}")
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=entry["offset"])
        arr = arr.reshape(entry["shape"]).astype(np.float32)
        name = entry["name"]
        if name.startswith(_M) or name.startswith(_V):
            moments.setdefault(name[len(_M):], {})[name[:len(_M)]] = arr
        else:
            state.params[name] = Param(name, arr, trainable=entry["trainable"])
    for name, mv in moments.items():
        state.opt_moments[name] = (mv[_M], mv[_V])
    return state, header["meta"]


def save(state: ModelState, path: str | Path, meta: dict | None = None) -> None:
    Path(path).write_bytes(to_bytes(state, meta))


def load(path: str | Path) -> tuple[ModelState, dict]:
    return from_bytes(Path(path).read_bytes())
