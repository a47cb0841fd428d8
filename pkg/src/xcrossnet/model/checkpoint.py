"""Versioned checkpoint container.

Layout::

    b"XCNCKPT\\0"            8-byte magic
    uint32 LE                 format version
    uint64 LE                 header length in bytes
    header                    UTF-8 JSON: version, model config, step, epoch, extra
                              metadata, and a blob index [{name, group, shape, offset}]
    blobs                     float64 little-endian, concatenated in index order

Groups separate model parameters ("param") from optimizer moments and any
other arrays ("m", "v", "input", ...), so the same container doubles as the
crash-dump format.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .params import ModelParameters, init_params

MAGIC = b"XCNCKPT\0"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    step: int = 0
    epoch: int = 0
    arrays: "OrderedDict[str, OrderedDict[str, np.ndarray]]" = field(default_factory=OrderedDict)
    meta: dict = field(default_factory=dict)

    def group(self, name: str) -> "OrderedDict[str, np.ndarray]":
        return self.arrays.get(name, OrderedDict())

    def params(self) -> ModelParameters:
        p = init_params(self.config, seed=0)
        p.load_state(self.group("param"))
        return p


def save_checkpoint(path, cfg: ModelConfig, arrays: dict, step: int = 0, epoch: int = 0, meta: dict | None = None):
    """``arrays`` maps group name -> {array name -> ndarray}. Writes atomically via a temp file."""
    index, blobs, offset = [], [], 0
    for group, named in arrays.items():
        for name, arr in named.items():
            a = np.ascontiguousarray(arr, dtype="<f8")
            index.append({"name": name, "group": group, "shape": list(a.shape), "offset": offset})
            blob = a.tobytes()
            blobs.append(blob)
            offset += len(blob)
    header = {"version": FORMAT_VERSION, "config": cfg.to_dict(), "step": int(step), "epoch": int(epoch),
              "meta": meta or {}, "index": index}
    hb = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", FORMAT_VERSION, len(hb)))
        f.write(hb)
        for b in blobs:
            f.write(b)
    tmp.replace(path)
    return path


def load_checkpoint(path, expected: ModelConfig | None = None) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    header = json.loads(raw[20:20 + hlen].decode())
    cfg = ModelConfig.from_dict(header["config"])
    if expected is not None:
        d = expected.diff(cfg)
        if d:
            lines = ", ".join(f"{k}: checkpoint={b} expected={a}" for k, (a, b) in d.items())
            raise CheckpointError(f"{path}: config mismatch ({lines})")
    body = raw[20 + hlen:]
    arrays: OrderedDict = OrderedDict()
    for ent in header["index"]:
        n = int(np.prod(ent["shape"], dtype=np.int64)) * 8
        buf = body[ent["offset"]:ent["offset"] + n]
        if len(buf) != n:
            raise CheckpointError(f"{path}: truncated blob {ent['group']}/{ent['name']}")
        arr = np.frombuffer(buf, dtype="<f8").reshape(ent["shape"]).astype(np.float64)
        arrays.setdefault(ent["group"], OrderedDict())[ent["name"]] = arr
    return Checkpoint(cfg, header["step"], header["epoch"], arrays, header.get("meta", {}))
