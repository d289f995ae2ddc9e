"""Shared on-disk array container used for checkpoints and dense arrays.

Layout: a directory holding ``manifest.json`` and a single ``blob.bin``.
The manifest maps each array name to shape, dtype, byte offset and a
sha256 digest of its segment; it also carries an arbitrary JSON config
snapshot. Blobs are raw little-endian float32 in row-major order, so a
save -> load -> save cycle is byte-identical and digests verify on load.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

MANIFEST_NAME = "manifest.json"
BLOB_NAME = "blob.bin"
FORMAT = "facevq-container-v1"


class ContainerError(RuntimeError):
    """Missing, malformed, or corrupt container."""


def _as_float32(arr) -> np.ndarray:
    if hasattr(arr, "detach"):
        arr = arr.detach().cpu().numpy()
    out = np.ascontiguousarray(np.asarray(arr), dtype="<f4")
    return out


def array_digest(arr) -> str:
    """sha256 hex digest of an array's canonical float32 bytes."""
    return hashlib.sha256(_as_float32(arr).tobytes()).hexdigest()


def params_digest(tensors: dict) -> str:
    """Order-independent digest over a named set of arrays.

    Used for the trainer freeze contracts: two parameter sets digest
    equal iff every named array is bit-identical.
    """
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode("utf-8"))
        h.update(_as_float32(tensors[name]).tobytes())
    return h.hexdigest()


def save_container(path: str | Path, tensors: dict, config: dict | None = None) -> Path:
    """Write arrays plus a config snapshot to a container directory."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = {}
    offset = 0
    blob_parts = []
    for name in sorted(tensors):
        arr = _as_float32(tensors[name])
        raw = arr.tobytes()
        entries[name] = {
            "shape": list(arr.shape),
            "dtype": "float32",
            "offset": offset,
            "nbytes": len(raw),
            "sha256": hashlib.sha256(raw).hexdigest(),
        }
        blob_parts.append(raw)
        offset += len(raw)
    manifest = {
        "format": FORMAT,
        "tensors": entries,
        "config": config if config is not None else {},
    }
    with open(path / BLOB_NAME, "wb") as fh:
        fh.write(b"".join(blob_parts))
    with open(path / MANIFEST_NAME, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, separators=(",", ":"))
    return path


def load_container(path: str | Path, verify: bool = True) -> tuple[dict, dict]:
    """Read a container back as ``(arrays, config)``.

    Raises ContainerError if files are missing or a digest mismatches.
    """
    path = Path(path)
    manifest_path = path / MANIFEST_NAME
    if not manifest_path.exists():
        raise ContainerError(f"no container manifest at {manifest_path}")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != FORMAT:
        raise ContainerError(f"unrecognized container format {manifest.get('format')!r}")
    blob = (path / BLOB_NAME).read_bytes()
    arrays = {}
    for name, ent in manifest["tensors"].items():
        raw = blob[ent["offset"]:ent["offset"] + ent["nbytes"]]
        if len(raw) != ent["nbytes"]:
            raise ContainerError(f"truncated blob for '{name}' in {path}")
        if verify and hashlib.sha256(raw).hexdigest() != ent["sha256"]:
            raise ContainerError(f"digest mismatch for '{name}' in {path}")
        arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(ent["shape"]).copy()
    return arrays, manifest.get("config", {})


def container_digest(path: str | Path) -> str:
    """Digest of a saved container (manifest + blob bytes)."""
    path = Path(path)
    h = hashlib.sha256()
    h.update((path / MANIFEST_NAME).read_bytes())
    h.update((path / BLOB_NAME).read_bytes())
    return h.hexdigest()
