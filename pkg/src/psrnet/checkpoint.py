"""Model checkpoints: one PGRD file per tensor plus a JSON manifest."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError
from .grid import decode_grid, encode_grid

MANIFEST = "manifest.json"


@dataclass
class ModelCheckpoint:
    kind: str
    config: dict
    state: dict[str, np.ndarray]
    seed: int
    metrics: dict = field(default_factory=dict)

    def copy(self) -> "ModelCheckpoint":
        return ModelCheckpoint(self.kind, dict(self.config),
                               {k: v.copy() for k, v in self.state.items()},
                               self.seed, dict(self.metrics))


def _file_name(name: str) -> str:
    if not re.fullmatch(r"[A-Za-z0-9_.]+", name):
        raise FormatError(f"tensor name {name!r} is not file-safe")
    return name + ".pgrd"


def save_checkpoint(ckpt: ModelCheckpoint, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = sorted(ckpt.state)
    for name in names:
        (directory / _file_name(name)).write_bytes(encode_grid(ckpt.state[name]))
    manifest = {
        "kind": ckpt.kind,
        "config": ckpt.config,
        "seed": ckpt.seed,
        "metrics": ckpt.metrics,
        "tensors": names,
    }
    (directory / MANIFEST).write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return directory


def load_checkpoint(directory) -> ModelCheckpoint:
    directory = Path(directory)
    path = directory / MANIFEST
    if not path.exists():
        raise FormatError(f"no checkpoint manifest in {directory}")
    manifest = json.loads(path.read_text(encoding="utf-8"))
    state = {name: decode_grid((directory / _file_name(name)).read_bytes()) for name in manifest["tensors"]}
    return ModelCheckpoint(manifest["kind"], manifest["config"], state, manifest["seed"], manifest.get("metrics", {}))
