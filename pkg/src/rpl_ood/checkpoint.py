"""Named-tensor checkpoint container.

A checkpoint is a single ``.npz`` archive.  Every array is stored under its
parameter name; the reserved entry ``__manifest__`` holds a UTF-8 JSON
document with the format version, per-tensor name/shape/dtype/group tags and
arbitrary metadata (architecture config, frozen checksum, ...).
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import torch

FORMAT_VERSION = "rpl-ood-tensors/1"
_MANIFEST_KEY = "__manifest__"


def tensor_checksum(named: Iterable[tuple[str, torch.Tensor]]) -> str:
    """SHA-256 over names, shapes, dtypes and raw bytes, in name order."""
    h = hashlib.sha256()
    for name, t in sorted(named, key=lambda kv: kv[0]):
        arr = t.detach().cpu().contiguous().numpy()
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(str(arr.dtype).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def save_tensors(
    path: str | Path,
    tensors: Mapping[str, torch.Tensor],
    groups: Mapping[str, str],
    meta: Mapping | None = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {name: t.detach().cpu().numpy() for name, t in tensors.items()}
    manifest = {
        "format": FORMAT_VERSION,
        "tensors": [
            {"name": n, "shape": list(a.shape), "dtype": str(a.dtype), "group": groups[n]} for n, a in arrays.items()
        ],
        "meta": dict(meta or {}),
    }
    blob = np.frombuffer(json.dumps(manifest).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays, **{_MANIFEST_KEY: blob})
    return path


def load_tensors(path: str | Path, drop_groups: Iterable[str] = ()) -> tuple[dict[str, torch.Tensor], dict]:
    """Return ``(tensors, manifest)``, skipping tensors tagged with ``drop_groups``."""
    drop = set(drop_groups)
    with np.load(path) as npz:
        manifest = json.loads(npz[_MANIFEST_KEY].tobytes().decode())
        if manifest.get("format") != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format {manifest.get('format')!r}")
        tensors = {}
        for entry in manifest["tensors"]:
            if entry["group"] in drop:
                continue
            arr = npz[entry["name"]]
            if list(arr.shape) != entry["shape"]:
                raise ValueError(f"shape mismatch for {entry['name']}")
            tensors[entry["name"]] = torch.from_numpy(arr.copy())
    return tensors, manifest
