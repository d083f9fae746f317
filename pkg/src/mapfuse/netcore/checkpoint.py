"""Checkpoint file: JSON manifest followed by raw little-endian float32 arrays.

Layout::

    b"MFCKPT1\\n"  | u64 LE header length | header JSON (utf-8, sorted keys) | data

The header holds ``config``, ``step``, ``seed`` and a ``tensors`` list of
``{"name", "shape"}`` in storage order. Writing is byte-deterministic.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from mapfuse.netcore.config import NetworkConfig
from mapfuse.netcore.model import LocalizationNet

MAGIC = b"MFCKPT1\n"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: NetworkConfig
    tensors: dict[str, np.ndarray]
    step: int = 0
    seed: int = 0
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: LocalizationNet, step: int = 0, seed: int = 0, **extra) -> Checkpoint:
        tensors = {k: v.detach().cpu().float().numpy().copy() for k, v in model.state_dict().items()}
        return cls(model.config, tensors, step, seed, extra)

    def to_model(self, dtype=torch.float32) -> LocalizationNet:
        model = LocalizationNet(self.config).to(dtype)
        own = model.state_dict()
        missing = set(own) - set(self.tensors)
        unexpected = set(self.tensors) - set(own)
        if missing or unexpected:
            raise CheckpointError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        model.load_state_dict({k: torch.from_numpy(np.array(v)).to(dtype) for k, v in self.tensors.items()})
        return model


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    header = {
        "config": ckpt.config.to_dict(),
        "step": int(ckpt.step),
        "seed": int(ckpt.seed),
        "extra": ckpt.extra,
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in ckpt.tensors.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for v in ckpt.tensors.values():
            fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    data = path.read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack_from("<Q", data, len(MAGIC))
    off = len(MAGIC) + 8
    header = json.loads(data[off : off + n].decode("utf-8"))
    off += n
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        if off + 4 * count > len(data):
            raise CheckpointError(f"{path}: truncated while reading {entry['name']}")
        tensors[entry["name"]] = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shape).copy()
        off += 4 * count
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} trailing bytes")
    return Checkpoint(
        NetworkConfig.from_dict(header["config"]),
        tensors,
        header["step"],
        header["seed"],
        header.get("extra", {}),
    )
