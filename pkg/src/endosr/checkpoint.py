"""Versioned little-endian tensor container used for model, optimizer and extractor weights.

Layout::

    b"ENL2H"  u32 version  u32 record_count
    record*:  u32 name_len  name(utf-8)  u8 dtype_tag  u32 rank  u64 dims[rank]  raw data

Float tensors are stored as raw 32-bit floats; integer and byte tensors (step
counters, RNG state, JSON metadata) use their own tags.
"""

from __future__ import annotations

import io
import json
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .errors import ConfigurationError, FormatError, StorageError

MAGIC = b"ENL2H"
VERSION = 1
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8"), 4: np.dtype("u1")}
_TAGS = {np.dtype("float32"): 1, np.dtype("float64"): 2, np.dtype("int64"): 3, np.dtype("uint8"): 4}
META_KEY = "__meta__"


def _as_numpy(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    arr = np.asarray(value)
    if arr.dtype.kind == "f" and arr.dtype != np.float64:
        arr = arr.astype(np.float32)
    elif arr.dtype.kind in "iu" and arr.dtype != np.uint8:
        arr = arr.astype(np.int64)
    elif arr.dtype == np.bool_:
        arr = arr.astype(np.uint8)
    return arr


def encode(tensors: Mapping[str, object], meta: dict | None = None) -> bytes:
    items = list(tensors.items())
    if meta is not None:
        items.append((META_KEY, np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)))
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(items)))
    for name, value in items:
        arr = _as_numpy(value)
        tag = _TAGS.get(arr.dtype)
        if tag is None:
            raise ConfigurationError(f"cannot store tensor {name!r} of dtype {arr.dtype}")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BI", tag, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=DTYPES[tag]).tobytes())
    return buf.getvalue()


def decode(data: bytes, source: str = "<bytes>") -> tuple[OrderedDict, dict | None]:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise FormatError(f"{source}: truncated checkpoint (needed {n} bytes at offset {pos})")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(len(MAGIC))) != MAGIC:
        raise FormatError(f"{source}: not a checkpoint (bad magic bytes)")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"{source}: unsupported checkpoint version {version} (expected {VERSION})")
    tensors: OrderedDict = OrderedDict()
    meta = None
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        try:
            name = bytes(take(name_len)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{source}: corrupt tensor name") from exc
        tag, rank = struct.unpack("<BI", take(5))
        if tag not in DTYPES:
            raise FormatError(f"{source}: tensor {name!r} has unknown dtype tag {tag}")
        if rank > 16:
            raise FormatError(f"{source}: tensor {name!r} has implausible rank {rank}")
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        dtype = DTYPES[tag]
        count_items = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(take(count_items * dtype.itemsize), dtype=dtype).reshape(dims).copy()
        if name == META_KEY:
            meta = json.loads(arr.tobytes().decode("utf-8"))
        else:
            tensors[name] = arr
    if pos != len(view):
        raise FormatError(f"{source}: {len(view) - pos} trailing bytes after last record")
    return tensors, meta


def save(path, tensors: Mapping[str, object], meta: dict | None = None) -> None:
    path = Path(path)
    payload = encode(tensors, meta)
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp.write_bytes(payload)
        tmp.replace(path)
    except OSError as exc:
        raise StorageError(f"cannot write checkpoint {path}: {exc}") from exc


def load(path) -> tuple[OrderedDict, dict | None]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise StorageError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode(data, str(path))


def module_tensors(module: torch.nn.Module, prefix: str) -> OrderedDict:
    """Parameters and buffers of ``module`` under ``prefix/``."""
    return OrderedDict((f"{prefix}/{k}", v) for k, v in module.state_dict().items())


def load_module(module: torch.nn.Module, tensors: Mapping[str, np.ndarray], prefix: str) -> None:
    """Copy ``prefix/...`` tensors into ``module`` after checking names and shapes."""
    state = module.state_dict()
    found = {k[len(prefix) + 1 :]: v for k, v in tensors.items() if k.startswith(prefix + "/")}
    missing = sorted(set(state) - set(found))
    unexpected = sorted(set(found) - set(state))
    wrong = [f"{k}: file {tuple(found[k].shape)} vs model {tuple(state[k].shape)}"
             for k in sorted(set(state) & set(found)) if tuple(found[k].shape) != tuple(state[k].shape)]
    if missing or unexpected or wrong:
        parts = []
        if missing:
            parts.append(f"missing {missing[:5]}{'...' if len(missing) > 5 else ''}")
        if unexpected:
            parts.append(f"unexpected {unexpected[:5]}{'...' if len(unexpected) > 5 else ''}")
        if wrong:
            parts.append("shape mismatch " + "; ".join(wrong[:5]))
        raise ConfigurationError(f"checkpoint does not match the {prefix} configuration: " + ", ".join(parts))
    module.load_state_dict({k: torch.from_numpy(np.array(v)).to(state[k].dtype) for k, v in found.items()})
