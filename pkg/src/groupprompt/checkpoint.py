"""Parameter checkpoints: a JSON index plus one flat float64 blob.

Layout of a checkpoint directory::

    index.json   {"format": 1, "meta": {...}, "params": [{name, shape, frozen, offset, count}, ...]}
    params.bin   little-endian float64 values, concatenated in index order

Backbone parameters come first, so the backbone block is one contiguous
byte range that can be compared between checkpoints.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .nn import Module

FORMAT = 1
DTYPE = np.dtype("<f8")


@dataclass
class ParamRecord:
    name: str
    shape: tuple[int, ...]
    frozen: bool
    offset: int   # in values, not bytes
    count: int


@dataclass
class Checkpoint:
    meta: dict
    records: list[ParamRecord]
    values: dict[str, np.ndarray]

    def block_bytes(self, prefix: str, blob: bytes) -> bytes:
        """Raw bytes of all parameters whose name starts with ``prefix``."""
        chunks = [blob[r.offset * 8:(r.offset + r.count) * 8] for r in self.records
                  if r.name.startswith(prefix)]
        return b"".join(chunks)


def _ordered(model: Module):
    params = list(model.named_parameters())
    first = [(n, p) for n, p in params if n.startswith("backbone.")]
    rest = [(n, p) for n, p in params if not n.startswith("backbone.")]
    return first + rest


def save(path, model: Module, meta: dict) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    records, chunks, offset = [], [], 0
    for name, p in _ordered(model):
        flat = np.ascontiguousarray(p.value, dtype=DTYPE).reshape(-1)
        records.append({"name": name, "shape": list(p.shape), "frozen": bool(p.frozen),
                        "offset": offset, "count": int(flat.size)})
        chunks.append(flat.tobytes())
        offset += flat.size
    index = {"format": FORMAT, "meta": meta, "params": records}
    tmp = path / "params.bin.tmp"
    tmp.write_bytes(b"".join(chunks))
    os.replace(tmp, path / "params.bin")
    (path / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")


def load(path) -> Checkpoint:
    path = Path(path)
    try:
        index = json.loads((path / "index.json").read_text())
        blob = (path / "params.bin").read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointError(f"no checkpoint at {path}: {exc.filename} missing") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path / 'index.json'}: invalid JSON ({exc})") from exc
    if index.get("format") != FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {index.get('format')!r}")
    data = np.frombuffer(blob, dtype=DTYPE)
    records, values = [], {}
    for r in index["params"]:
        rec = ParamRecord(r["name"], tuple(r["shape"]), bool(r["frozen"]), int(r["offset"]), int(r["count"]))
        if int(np.prod(rec.shape)) != rec.count or rec.offset + rec.count > data.size:
            raise CheckpointError(f"parameter {rec.name}: index inconsistent with params.bin")
        records.append(rec)
        values[rec.name] = data[rec.offset:rec.offset + rec.count].reshape(rec.shape).copy()
    return Checkpoint(index.get("meta", {}), records, values)


def read_blob(path) -> bytes:
    return (Path(path) / "params.bin").read_bytes()


def load_into(model: Module, ckpt: Checkpoint, prefixes: tuple[str, ...] | None = None,
              strict: bool = True) -> list[str]:
    """Copy values into ``model`` by name; returns the names loaded.

    Only names under ``prefixes`` are considered when given.  With ``strict``
    every considered model parameter must exist in the checkpoint; a shape
    mismatch is always an error.
    """
    loaded = []
    for name, p in model.named_parameters():
        if prefixes is not None and not name.startswith(prefixes):
            continue
        if name not in ckpt.values:
            if strict:
                raise CheckpointError(f"checkpoint has no parameter {name}")
            continue
        v = ckpt.values[name]
        if v.shape != p.shape:
            raise CheckpointError(f"parameter {name}: checkpoint shape {v.shape}, model shape {p.shape}")
        p.value = v.copy()
        loaded.append(name)
    return loaded
