"""Checkpoint directory: ``manifest.json`` plus one little-endian float64 blob.

The manifest lists every tensor's name, shape and element offset into
``tensors.bin`` and carries non-tensor state (iteration, config echo, mode
tags, RNG states) as JSON.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MANIFEST = "manifest.json"
BLOB = "tensors.bin"
FORMAT = "idrnet-checkpoint/1"


def save(path: str | Path, tensors: dict[str, np.ndarray], meta: dict) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.ravel())
        offset += arr.size
    blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f8")
    (path / BLOB).write_bytes(blob.astype("<f8").tobytes())
    manifest = {"format": FORMAT, "count": offset, "tensors": entries, "meta": meta}
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1))
    return path


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    manifest = json.loads((path / MANIFEST).read_text())
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {manifest.get('format')!r}")
    blob = np.frombuffer((path / BLOB).read_bytes(), dtype="<f8")
    if blob.size != manifest["count"]:
        raise ValueError(f"{path}: blob holds {blob.size} values, manifest expects {manifest['count']}")
    tensors = {}
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        tensors[e["name"]] = blob[e["offset"]:e["offset"] + n].reshape(e["shape"]).astype(np.float64)
    return tensors, manifest["meta"]
