"""MKDF named-tensor archives.

Layout: ``b"MKDF"`` | version (u32 LE) | header length (u32 LE) | UTF-8 JSON
header | float32 little-endian blobs in header order. The header lists
``name``, ``shape`` and byte ``offset`` (relative to the first blob) of every
tensor plus a free-form ``meta`` dict.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, FormatError, MissingArtifactError

MAGIC = b"MKDF"
VERSION = 1


def config_hash(payload) -> str:
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def architecture_hash(state: dict) -> str:
    """Hash of parameter names and shapes only."""
    return config_hash([[name, list(np.shape(t))] for name, t in state.items()])


def tensor_digest(state: dict, names=None) -> str:
    """sha256 over the raw bytes of the selected tensors, in name order."""
    h = hashlib.sha256()
    for name in sorted(names if names is not None else state):
        value = state[name]
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().numpy()
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(value).tobytes())
    return h.hexdigest()


def save_checkpoint(path, state: dict, meta: dict | None = None) -> None:
    path = Path(path)
    entries, blobs, offset = [], [], 0
    for name, tensor in state.items():
        if isinstance(tensor, torch.Tensor):
            tensor = tensor.detach().cpu().numpy()
        array = np.ascontiguousarray(tensor, dtype="<f4")
        blobs.append(array.tobytes())
        entries.append({"name": name, "shape": list(array.shape), "offset": offset})
        offset += array.nbytes
    meta = dict(meta or {})
    meta.setdefault("arch_hash", architecture_hash(state))
    header = json.dumps({"tensors": entries, "meta": meta}, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    try:
        with open(tmp, "wb") as fh:
            fh.write(MAGIC + struct.pack("<II", VERSION, len(header)) + header)
            for blob in blobs:
                fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


def load_checkpoint(path) -> tuple[OrderedDict, dict]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"checkpoint {path} does not exist")
    data = path.read_bytes()
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: not an MKDF archive")
    if len(data) < 12:
        raise FormatError(f"{path}: truncated header")
    version, header_len = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise FormatError(f"{path}: unsupported MKDF version {version}")
    try:
        header = json.loads(data[12 : 12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header") from exc
    base = 12 + header_len
    state = OrderedDict()
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = base + entry["offset"]
        if start + 4 * count > len(data):
            raise FormatError(f"{path}: tensor {entry['name']} runs past end of file")
        array = np.frombuffer(data, dtype="<f4", count=count, offset=start).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(array.astype(np.float32))
    return state, header["meta"]


def save_module(path, module: torch.nn.Module, config: dict, **meta) -> None:
    state = module.state_dict()
    save_checkpoint(path, state, {"config": config, "config_hash": config_hash(config), **meta})


def load_into(module: torch.nn.Module, path) -> dict:
    """Load an archive into ``module``; names and shapes must match exactly."""
    state, meta = load_checkpoint(path)
    expected = architecture_hash(module.state_dict())
    if meta.get("arch_hash") != expected:
        raise ConfigError(f"{path}: architecture hash {meta.get('arch_hash')} does not match model ({expected})")
    module.load_state_dict(state, strict=True)
    return meta
