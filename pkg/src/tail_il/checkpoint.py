"""Binary tensor files: one little-endian f64 blob plus a JSON manifest.

A checkpoint is a directory holding ``weights.bin`` and ``manifest.json``.
The manifest lists every array as {name, group, shape, offset, frozen} and
carries a format version plus free-form metadata (spec echo, digests, ...).
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Mapping

import numpy as np

FORMAT_VERSION = 1
BLOB = "weights.bin"
MANIFEST = "manifest.json"


class CheckpointError(RuntimeError):
    pass


class DigestMismatch(CheckpointError):
    pass


def digest_arrays(arrays: Mapping[str, np.ndarray]) -> str:
    """SHA-256 over (name, shape, bytes) triples in sorted name order."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        h.update(name.encode())
        h.update(b"\x00")
        h.update(json.dumps(list(a.shape)).encode())
        h.update(b"\x00")
        h.update(a.tobytes())
    return h.hexdigest()


def write_arrays(path: str | os.PathLike, arrays: Mapping[str, np.ndarray], *,
                 groups: Mapping[str, str] | None = None, frozen: Mapping[str, bool] | None = None,
                 meta: Mapping | None = None, kind: str = "checkpoint") -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(path / BLOB, "wb") as fh:
        for name in sorted(arrays):
            a = np.ascontiguousarray(arrays[name], dtype="<f8")
            fh.write(a.tobytes())
            group = (groups or {}).get(name)
            entries.append({
                "name": name,
                "group": group,
                "shape": list(a.shape),
                "offset": offset,
                "frozen": bool((frozen or {}).get(group, False)) if group else False,
            })
            offset += a.nbytes
    manifest = {"format_version": FORMAT_VERSION, "kind": kind, "arrays": entries,
                "digest": digest_arrays(arrays), "meta": dict(meta or {})}
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def read_arrays(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except FileNotFoundError as exc:
        raise CheckpointError(f"no manifest in {path}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt manifest in {path}: {exc}") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {version!r} in {path}")
    try:
        blob = (path / BLOB).read_bytes()
        arrays = {}
        for e in manifest["arrays"]:
            n = int(np.prod(e["shape"], dtype=np.int64))
            start = e["offset"]
            if start + 8 * n > len(blob):
                raise CheckpointError(f"array {e['name']} overruns blob in {path}")
            arrays[e["name"]] = np.frombuffer(blob, dtype="<f8", count=n, offset=start).reshape(e["shape"]).copy()
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"corrupt manifest in {path}: {exc}") from exc
    if digest_arrays(arrays) != manifest.get("digest"):
        raise CheckpointError(f"content digest mismatch in {path}")
    return arrays, manifest


def dir_size(path: str | os.PathLike) -> int:
    path = Path(path)
    return sum(f.stat().st_size for f in path.iterdir() if f.is_file())
