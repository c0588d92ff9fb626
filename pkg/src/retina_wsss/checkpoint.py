"""Checkpoint container: JSON header followed by raw little-endian tensor payloads.

Layout::

    b"WSSSCKPT" | uint64 LE header length | header JSON (utf-8) | payloads

The header lists every tensor with name, shape, dtype, byte offset (relative
to the start of the payload section), byte length, CRC32 and trainable flag,
plus free-form ``meta`` (model config, epoch, step, ...). Optimizer state is
stored as tensors named ``optim/<param name>/<state key>``.
"""
from __future__ import annotations

import io
import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn

from .errors import CheckpointError, DimensionError

MAGIC = b"WSSSCKPT"
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}
OPTIM_PREFIX = "optim/"


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    trainable: dict[str, bool] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def _dtype_name(arr: np.ndarray) -> str:
    for name, code in _DTYPES.items():
        if arr.dtype == np.dtype(code):
            return name
    raise CheckpointError(f"unsupported dtype {arr.dtype}")


def _encode(arr: np.ndarray) -> np.ndarray:
    kind = {"f": {4: "<f4", 8: "<f8"}, "i": {8: "<i8"}}
    try:
        code = kind[arr.dtype.kind][arr.dtype.itemsize]
    except KeyError:
        if arr.dtype.kind in "iu":
            code = "<i8"
        else:
            raise CheckpointError(f"unsupported dtype {arr.dtype}") from None
    # ascontiguousarray would promote 0-d scalars to 1-d
    return np.array(arr, dtype=code, order="C")


def _build_header(ckpt: Checkpoint):
    entries, blobs, offset = [], [], 0
    for name in ckpt.tensors:
        arr = _encode(np.asarray(ckpt.tensors[name]))
        raw = arr.tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": _dtype_name(arr),
            "offset": offset,
            "nbytes": len(raw),
            "crc32": zlib.crc32(raw),
            "trainable": bool(ckpt.trainable.get(name, False)),
        })
        blobs.append(raw)
        offset += len(raw)
    return {"format": 1, "tensors": entries, "meta": ckpt.meta}, blobs


def save(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    header, blobs = _build_header(ckpt)
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)
    return path


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        head, _ = _read_head(fh, path)
    return head


def _read_head(fh, path):
    if fh.read(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    raw_len = fh.read(8)
    if len(raw_len) != 8:
        raise CheckpointError(f"{path}: truncated header length")
    (n,) = struct.unpack("<Q", raw_len)
    try:
        head = json.loads(fh.read(n).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    return head, len(MAGIC) + 8 + n


def load(path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    head, start = _read_head(io.BytesIO(data), path)
    tensors, trainable = {}, {}
    for e in head.get("tensors", []):
        name = e["name"]
        lo = start + e["offset"]
        raw = data[lo:lo + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"{path}: payload of tensor {name!r} is truncated")
        if zlib.crc32(raw) != e["crc32"]:
            raise CheckpointError(f"{path}: checksum mismatch in tensor {name!r}")
        code = _DTYPES.get(e["dtype"])
        if code is None:
            raise CheckpointError(f"{path}: tensor {name!r} has unknown dtype {e['dtype']!r}")
        arr = np.frombuffer(raw, dtype=code)
        if arr.size != int(np.prod(e["shape"], dtype=np.int64)):
            raise CheckpointError(f"{path}: tensor {name!r} size disagrees with shape {e['shape']}")
        tensors[name] = arr.reshape(e["shape"]).copy()
        trainable[name] = bool(e.get("trainable", False))
    return Checkpoint(tensors, trainable, head.get("meta", {}))


def from_module(model: nn.Module, optimizer: Optional[torch.optim.Optimizer] = None, meta: Optional[dict] = None
                ) -> Checkpoint:
    params = dict(model.named_parameters())
    tensors, trainable = {}, {}
    for name, t in model.state_dict().items():
        tensors[name] = t.detach().cpu().numpy()
        trainable[name] = bool(params[name].requires_grad) if name in params else False
    if optimizer is not None:
        ids = {id(p): n for n, p in params.items()}
        for p, state in optimizer.state.items():
            pname = ids[id(p)]
            for key, val in state.items():
                val = val if torch.is_tensor(val) else torch.tensor(val)
                tensors[f"{OPTIM_PREFIX}{pname}/{key}"] = val.detach().cpu().numpy()
    return Checkpoint(tensors, trainable, dict(meta or {}))


def load_into(model: nn.Module, ckpt: Checkpoint, optimizer: Optional[torch.optim.Optimizer] = None,
              strict: bool = True, prefixes: Optional[tuple] = None) -> dict:
    """Copy checkpoint tensors into ``model`` (and optimizer state).

    With ``strict=False`` (or ``prefixes`` restricting which names load),
    anything not loaded keeps its fresh initialization; the returned report
    lists those names under ``"fresh"``.
    """
    own = model.state_dict()
    params = dict(model.named_parameters())
    wanted = [n for n in own if prefixes is None or n.startswith(tuple(prefixes))]
    missing = [n for n in wanted if n not in ckpt.tensors]
    if strict and prefixes is None and missing:
        raise CheckpointError(f"checkpoint lacks tensor(s): {missing[:5]}")
    loaded = []
    with torch.no_grad():
        for name in wanted:
            if name not in ckpt.tensors:
                continue
            arr = ckpt.tensors[name]
            if tuple(arr.shape) != tuple(own[name].shape):
                raise DimensionError(
                    f"tensor {name!r}: checkpoint shape {tuple(arr.shape)} != model shape {tuple(own[name].shape)}")
            own[name].copy_(torch.from_numpy(arr).to(own[name].dtype))
            if name in params:
                params[name].requires_grad_(ckpt.trainable.get(name, params[name].requires_grad))
            loaded.append(name)
    if optimizer is not None:
        _load_optimizer(optimizer, params, ckpt)
    fresh = [n for n in own if n not in loaded]
    return {"loaded": loaded, "fresh": fresh, "partial": bool(fresh)}


def _load_optimizer(optimizer, params, ckpt: Checkpoint):
    by_param: dict[str, dict] = {}
    for name, arr in ckpt.tensors.items():
        if name.startswith(OPTIM_PREFIX):
            pname, key = name[len(OPTIM_PREFIX):].rsplit("/", 1)
            by_param.setdefault(pname, {})[key] = torch.from_numpy(arr.copy())
    for pname, state in by_param.items():
        if pname not in params:
            raise CheckpointError(f"optimizer state for unknown parameter {pname!r}")
        optimizer.state[params[pname]] = state
