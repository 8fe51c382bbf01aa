"""Stage checkpoints: a JSON manifest followed by a little-endian float32 blob.

On-disk layout::

    [u64 little-endian manifest length][manifest, UTF-8 JSON][float32 blob]

Tensor entries in the manifest give ``shape``, ``dtype`` and the byte
``offset``/``nbytes`` of each tensor inside the blob. The JSON is written with
sorted keys and no insignificant whitespace so that save -> load -> save is
byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

from .errors import InputError, LineageError, MissingArtifactError, StageOrderError

FORMAT = "hyperlab-ckpt/1"

STAGES = ("target", "draft", "teacher", "cfg", "tscd", "dmdo", "adp", "refl")

# stage -> required parent stage (None for roots)
PREDECESSOR: dict[str, str | None] = {
    "target": None,
    "draft": "target",
    "teacher": None,
    "cfg": "teacher",
    "tscd": "cfg",
    "dmdo": "tscd",
    "adp": "dmdo",
    "refl": "adp",
}


@dataclass
class StageCheckpoint:
    stage: str
    tensors: dict[str, np.ndarray]
    config: dict[str, Any] = field(default_factory=dict)
    seed: int | None = None
    # [{"stage": ..., "hash": ...}, ...] from the root down to the direct parent
    ancestors: list[dict[str, str]] = field(default_factory=list)
    metrics: dict[str, Any] = field(default_factory=dict)
    extra: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise InputError(f"unknown stage tag {self.stage!r}")
        self.tensors = {
            k: np.ascontiguousarray(np.asarray(v, dtype="<f4")) for k, v in self.tensors.items()
        }

    @property
    def parent_hash(self) -> str | None:
        return self.ancestors[-1]["hash"] if self.ancestors else None

    @property
    def lineage(self) -> list[str]:
        return [a["stage"] for a in self.ancestors] + [self.stage]

    def manifest(self) -> dict[str, Any]:
        entries = {}
        offset = 0
        for name in sorted(self.tensors):
            arr = self.tensors[name]
            entries[name] = {
                "shape": list(arr.shape),
                "dtype": "float32",
                "offset": offset,
                "nbytes": int(arr.nbytes),
            }
            offset += arr.nbytes
        return {
            "format": FORMAT,
            "stage": self.stage,
            "config": self.config,
            "seed": self.seed,
            "parent": self.parent_hash,
            "ancestors": self.ancestors,
            "lineage": self.lineage,
            "metrics": self.metrics,
            "extra": self.extra,
            "tensors": entries,
        }

    def to_bytes(self) -> bytes:
        header = json.dumps(self.manifest(), sort_keys=True, separators=(",", ":")).encode("utf-8")
        blob = b"".join(self.tensors[name].tobytes() for name in sorted(self.tensors))
        return struct.pack("<Q", len(header)) + header + blob

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def save(self, path: str | Path) -> str:
        data = self.to_bytes()
        Path(path).write_bytes(data)
        return hashlib.sha256(data).hexdigest()

    @classmethod
    def from_bytes(cls, data: bytes) -> "StageCheckpoint":
        if len(data) < 8:
            raise InputError("truncated checkpoint")
        (n,) = struct.unpack("<Q", data[:8])
        manifest = json.loads(data[8 : 8 + n].decode("utf-8"))
        if manifest.get("format") != FORMAT:
            raise InputError(f"unsupported checkpoint format {manifest.get('format')!r}")
        blob = memoryview(data)[8 + n :]
        tensors = {}
        for name, e in manifest["tensors"].items():
            raw = blob[e["offset"] : e["offset"] + e["nbytes"]]
            tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(e["shape"]).copy()
        return cls(
            stage=manifest["stage"],
            tensors=tensors,
            config=manifest["config"],
            seed=manifest["seed"],
            ancestors=manifest["ancestors"],
            metrics=manifest["metrics"],
            extra=manifest["extra"],
        )

    @classmethod
    def load(cls, path: str | Path) -> "StageCheckpoint":
        path = Path(path)
        if not path.is_file():
            raise MissingArtifactError(f"checkpoint not found: {path}")
        return cls.from_bytes(path.read_bytes())

    # -- module helpers -------------------------------------------------

    def load_into(self, module: torch.nn.Module, prefix: str = "", strict: bool = True) -> None:
        own = module.state_dict()
        sub = {k[len(prefix) :]: v for k, v in self.tensors.items() if k.startswith(prefix)}
        if strict:
            missing = set(own) - set(sub)
            if missing:
                raise InputError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
        with torch.no_grad():
            for name, t in own.items():
                if name in sub:
                    t.copy_(torch.from_numpy(sub[name]).to(t.dtype))


def module_tensors(module: torch.nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().float().numpy() for k, v in module.state_dict().items()}


def child_ancestors(parent: StageCheckpoint) -> list[dict[str, str]]:
    """Ancestor list for a checkpoint whose direct parent is ``parent``."""
    return list(parent.ancestors) + [{"stage": parent.stage, "hash": parent.digest()}]


def require_parent(stage: str, parent: StageCheckpoint | None) -> None:
    want = PREDECESSOR[stage]
    got = None if parent is None else parent.stage
    if want != got:
        raise StageOrderError(f"stage {stage!r} needs a {want!r} parent, got {got!r}")


def validate_lineage(ckpt: StageCheckpoint) -> None:
    """Check the recorded chain follows the stage order and contains no cycles."""
    chain = ckpt.lineage
    if PREDECESSOR[chain[0]] is not None:
        raise LineageError(f"lineage root {chain[0]!r} is not a root stage")
    for parent, child in zip(chain, chain[1:]):
        if PREDECESSOR[child] != parent:
            raise LineageError(f"{child!r} cannot follow {parent!r}")
    hashes = [a["hash"] for a in ckpt.ancestors]
    if len(set(hashes)) != len(hashes):
        raise LineageError("lineage contains a repeated checkpoint (cycle)")


def resolve_lineage(ckpt: StageCheckpoint, search: Mapping[str, StageCheckpoint]) -> list[StageCheckpoint]:
    """Follow parent hashes through ``search`` (hash -> checkpoint) back to the root."""
    out = [ckpt]
    seen = set()
    cur = ckpt
    while cur.parent_hash is not None:
        h = cur.parent_hash
        if h in seen:
            raise LineageError("cycle while resolving lineage")
        seen.add(h)
        if h not in search:
            raise MissingArtifactError(f"ancestor {h[:12]} not found")
        cur = search[h]
        out.append(cur)
    return out[::-1]
