"""Checkpoint format: JSON manifest + name-indexed raw float64 blobs.

A checkpoint directory holds exactly two files:

    manifest.json   concept spec, architecture, schedule id, world config,
                    step counter, metric history, and a byte index of every
                    parameter array
    params.bin      little-endian float64 blobs, concatenated in manifest
                    order

The manifest is written canonically (sorted keys, fixed separators), so
save -> load -> save round-trips byte-exactly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffengine import ParameterSet
from .diffusion import NoiseSchedule
from .energymodel import ConceptSpec, EnergyNetwork, NetConfig
from .synthworld import WorldConfig

FORMAT = "cbgen-checkpoint-v1"
MANIFEST_NAME = "manifest.json"
PARAMS_NAME = "params.bin"


@dataclass
class Checkpoint:
    """A loaded checkpoint: the network plus its training context."""

    net: EnergyNetwork
    schedule: NoiseSchedule
    world: WorldConfig | None
    step: int = 0
    metrics: list = field(default_factory=list)

    @property
    def trained(self) -> bool:
        return self.step > 0


def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


def save_checkpoint(path, ckpt: Checkpoint) -> str:
    """Write manifest + blobs; returns the checkpoint hash."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)

    blobs = []
    index = {}
    offset = 0
    # canonical blob order (sorted names) so save -> load -> save is byte-exact
    for name in sorted(ckpt.net.params.names()):
        tensor = ckpt.net.params[name]
        raw = np.ascontiguousarray(tensor.value, dtype="<f8").tobytes()
        index[name] = {
            "shape": list(tensor.value.shape),
            "offset": offset,
            "nbytes": len(raw),
        }
        blobs.append(raw)
        offset += len(raw)

    manifest = {
        "format": FORMAT,
        "concept_spec": ckpt.net.spec.to_manifest(),
        "net_config": ckpt.net.config.to_manifest(),
        "schedule": ckpt.schedule.to_manifest(),
        "world": None if ckpt.world is None else ckpt.world.to_manifest(),
        "step": int(ckpt.step),
        "metrics": ckpt.metrics,
        "params": index,
    }
    (path / MANIFEST_NAME).write_text(_canonical_json(manifest))
    (path / PARAMS_NAME).write_bytes(b"".join(blobs))
    return checkpoint_hash(path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    manifest = json.loads((path / MANIFEST_NAME).read_text())
    if manifest.get("format") != FORMAT:
        raise ValueError(f"not a {FORMAT} checkpoint: {path}")
    raw = (path / PARAMS_NAME).read_bytes()

    spec = ConceptSpec.from_manifest(manifest["concept_spec"])
    cfg = NetConfig.from_manifest(manifest["net_config"])
    arrays = {}
    for name, entry in manifest["params"].items():
        start, nbytes = entry["offset"], entry["nbytes"]
        arr = np.frombuffer(raw[start : start + nbytes], dtype="<f8").astype(np.float64)
        arrays[name] = arr.reshape(entry["shape"])
    net = EnergyNetwork(spec, cfg, ParameterSet(arrays))

    world_m = manifest.get("world")
    return Checkpoint(
        net=net,
        schedule=NoiseSchedule.from_manifest(manifest["schedule"]),
        world=None if world_m is None else WorldConfig.from_manifest(world_m),
        step=int(manifest["step"]),
        metrics=manifest.get("metrics", []),
    )


def checkpoint_hash(path) -> str:
    """SHA-256 over manifest and parameter bytes."""
    path = Path(path)
    h = hashlib.sha256()
    h.update((path / MANIFEST_NAME).read_bytes())
    h.update((path / PARAMS_NAME).read_bytes())
    return h.hexdigest()
