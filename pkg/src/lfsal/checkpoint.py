"""Model checkpoints.

Layout: 8-byte magic, little-endian uint32 header length, UTF-8 JSON header,
then each parameter as a raw little-endian buffer at the offset recorded in
the header (offsets are relative to the start of the data section).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .network import ModelConfig, init_params
from .params import named_parameters

MAGIC = b"LFSALCK\x00"
VERSION = 1


class CheckpointError(Exception):
    pass


def save_checkpoint(path, params: Mapping, cfg: ModelConfig, meta: Mapping | None = None) -> None:
    entries, buffers, offset = [], [], 0
    for name, t in named_parameters(params):
        arr = np.ascontiguousarray(t.data, dtype=t.data.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str, "offset": offset, "nbytes": len(raw)})
        buffers.append(raw)
        offset += len(raw)
    header = {"version": VERSION, "config": cfg.to_dict(), "params": entries, "meta": dict(meta or {})}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for raw in buffers:
            fh.write(raw)


def read_header(path) -> tuple[dict, bytes]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    (n,) = struct.unpack_from("<I", raw, len(MAGIC))
    start = len(MAGIC) + 4
    try:
        header = json.loads(raw[start : start + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    return header, raw[start + n :]


def load_checkpoint(path) -> tuple[ModelConfig, dict, dict]:
    """Return ``(config, params, meta)``; parameters are rebuilt bit-exactly."""
    header, data = read_header(path)
    cfg = ModelConfig(**header["config"])
    params = init_params(cfg)
    live = dict(named_parameters(params))
    stored = {e["name"]: e for e in header["params"]}
    if set(stored) != set(live):
        missing = sorted(set(live) - set(stored))
        extra = sorted(set(stored) - set(live))
        raise CheckpointError(f"{path}: parameter names do not match the model (missing {missing}, unexpected {extra})")
    for name, t in live.items():
        e = stored[name]
        if e["offset"] + e["nbytes"] > len(data):
            raise CheckpointError(f"{path}: truncated data for {name}")
        arr = np.frombuffer(data, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"])), offset=e["offset"])
        if tuple(e["shape"]) != t.shape:
            raise CheckpointError(f"{path}: {name} has shape {tuple(e['shape'])}, model expects {t.shape}")
        t.data = arr.reshape(e["shape"]).astype(t.data.dtype)
    return cfg, params, header.get("meta", {})
