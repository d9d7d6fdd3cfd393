"""NNCK checkpoint files.

Layout (little-endian): b"NNCK", u16 version, u32 manifest length, UTF-8 JSON manifest, then
float32 blobs for every parameter followed by the optimizer's first and second moments.
The manifest carries layer descriptions, blob offsets, optimizer scalars and RNG states.
"""
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np

from src.nn.layers import Module
from src.nn.optim import Adam
from src.utils.errors import ConfigError, UsageError
from src.utils.logging import logger

MAGIC = b"NNCK"
VERSION = 1
_HEADER = struct.Struct("<4sHI")
_F32 = np.dtype("<f4")


@dataclass
class Checkpoint:
    model: str
    meta: Dict
    layers: List[Dict]
    params: Dict[str, np.ndarray]
    optimizer: Optional[Dict] = None
    moments: Dict[str, List[np.ndarray]] = field(default_factory=dict)
    rng_states: Dict[str, Dict] = field(default_factory=dict)

    def restore(self, module: Module, optimizer: Optional[Adam] = None,
                rngs: Optional[Dict[str, np.random.Generator]] = None):
        module.load_state_dict(self.params)
        if optimizer is not None and self.optimizer is not None:
            optimizer.load_moments(self.moments["m"], self.moments["v"], self.optimizer["step"])
        for name, gen in (rngs or {}).items():
            if name in self.rng_states:
                gen.bit_generator.state = self.rng_states[name]


def save_checkpoint(
    path: Union[str, Path],
    model_name: str,
    module: Module,
    meta: Optional[Dict] = None,
    optimizer: Optional[Adam] = None,
    rngs: Optional[Dict[str, np.random.Generator]] = None
) -> int:
    """Write a checkpoint and return its size in bytes."""
    path = Path(path)
    named = module.named_parameters()
    blobs: List[bytes] = []
    entries = []
    offset = 0

    def add_blob(name: str, array: np.ndarray):
        nonlocal offset
        raw = np.ascontiguousarray(array, dtype=_F32).tobytes()
        entries.append({"name": name, "shape": list(array.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)

    for name, p in named:
        add_blob(name, p.data)
    opt_state = None
    if optimizer is not None:
        opt_state = optimizer.state()
        for (name, _), m in zip(named, optimizer.m):
            add_blob(f"adam.m.{name}", m)
        for (name, _), v in zip(named, optimizer.v):
            add_blob(f"adam.v.{name}", v)

    manifest = {
        "model": model_name,
        "meta": meta or {},
        "layers": [{"name": n, **mod.describe()} for n, mod in module.named_modules() if n],
        "blobs": entries,
        "optimizer": opt_state,
        "rng": {name: gen.bit_generator.state for name, gen in (rngs or {}).items()},
    }
    encoded = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, len(encoded)))
        f.write(encoded)
        for raw in blobs:
            f.write(raw)
    size = path.stat().st_size
    logger.info(f"Saved {model_name} checkpoint to {path} ({len(named)} tensors, {size} bytes)")
    return size


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Checkpoint not found: {path}")
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise UsageError(f"{path} is too short to be a checkpoint")
    magic, version, length = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise UsageError(f"{path} is not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise UsageError(f"{path}: unsupported checkpoint version {version}")
    start = _HEADER.size
    manifest = json.loads(data[start:start + length].decode("utf-8"))
    body = start + length

    arrays: Dict[str, np.ndarray] = {}
    for entry in manifest["blobs"]:
        lo = body + entry["offset"]
        arrays[entry["name"]] = np.frombuffer(data[lo:lo + entry["nbytes"]], dtype=_F32) \
            .reshape(entry["shape"]).astype(np.float32)

    params = {k: v for k, v in arrays.items() if not k.startswith("adam.")}
    moments = {}
    if manifest["optimizer"] is not None:
        moments = {
            "m": [arrays[f"adam.m.{k}"] for k in params],
            "v": [arrays[f"adam.v.{k}"] for k in params],
        }
    return Checkpoint(
        model=manifest["model"],
        meta=manifest["meta"],
        layers=manifest["layers"],
        params=params,
        optimizer=manifest["optimizer"],
        moments=moments,
        rng_states=manifest["rng"],
    )
