"""Checkpoint persistence: JSON manifest plus raw little-endian float64 blob.

A checkpoint is a directory holding ``manifest.json`` (parameter names,
shapes, byte offsets, and optional run metadata) and ``params.blob`` (the
concatenated raw values). Round trips are bit-exact.
"""

from __future__ import annotations

import json
import os
from typing import Any

import numpy as np

from .optim import ParameterStore

MANIFEST_NAME = "manifest.json"
BLOB_NAME = "params.blob"
_DTYPE = "<f8"


class CheckpointError(Exception):
    """Manifest/blob integrity violation."""


def save_checkpoint(path: str, store: ParameterStore, extra: dict[str, Any] | None = None) -> None:
    """Write all registered parameters plus optional metadata to ``path``."""
    os.makedirs(path, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name, p in store.items():
        raw = np.ascontiguousarray(p.values, dtype=_DTYPE).tobytes()
        entries.append({"name": name, "shape": list(p.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"dtype": _DTYPE, "blob_bytes": offset, "params": entries}
    if extra is not None:
        manifest["extra"] = extra
    with open(os.path.join(path, BLOB_NAME), "wb") as f:
        f.write(b"".join(chunks))
    with open(os.path.join(path, MANIFEST_NAME), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")


def read_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    """Load (values, extra) from a checkpoint directory, verifying integrity."""
    manifest_path = os.path.join(path, MANIFEST_NAME)
    blob_path = os.path.join(path, BLOB_NAME)
    if not os.path.exists(manifest_path) or not os.path.exists(blob_path):
        raise CheckpointError(f"checkpoint incomplete at {path}")
    with open(manifest_path, encoding="utf-8") as f:
        manifest = json.load(f)
    if manifest.get("dtype") != _DTYPE:
        raise CheckpointError(f"unsupported checkpoint dtype {manifest.get('dtype')!r}")
    with open(blob_path, "rb") as f:
        blob = f.read()
    if len(blob) != manifest["blob_bytes"]:
        raise CheckpointError(
            f"blob length {len(blob)} != manifest blob_bytes {manifest['blob_bytes']}")
    values: dict[str, np.ndarray] = {}
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = entry["offset"]
        end = start + 8 * count
        if end > len(blob):
            raise CheckpointError(f"blob truncated: parameter {entry['name']!r} overruns")
        arr = np.frombuffer(blob[start:end], dtype=_DTYPE).reshape(shape)
        values[entry["name"]] = arr.astype(np.float64)
    return values, manifest.get("extra", {})


def load_checkpoint(path: str, store: ParameterStore) -> dict[str, Any]:
    """Restore a store's parameters in place; returns the manifest extras.

    Every registered parameter must be present in the manifest with a
    matching shape.
    """
    values, extra = read_checkpoint(path)
    for name, p in store.items():
        if name not in values:
            raise CheckpointError(f"manifest missing parameter {name!r}")
        if values[name].shape != p.shape:
            raise CheckpointError(
                f"shape mismatch for {name!r}: checkpoint {values[name].shape}, "
                f"model {p.shape}")
    store.load(values)
    return extra
