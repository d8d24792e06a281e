"""Checkpoint container: JSON manifest + little-endian float64 blob.

File layout: a 4-byte little-endian manifest length, the UTF-8 JSON
manifest, then the raw value blob. The manifest lists every entry's name,
shape, dtype, and byte offset into the blob; ``extra`` carries arbitrary
JSON metadata (optimizer step, RNG state, config snapshot).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ValidationError

FORMAT = "evdetr-ckpt-v1"


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], extra: dict | None = None) -> None:
    entries = []
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "float64", "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    manifest = json.dumps({"format": FORMAT, "entries": entries, "extra": extra or {}}).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(manifest)))
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise ValidationError(f"checkpoint {path}: truncated header")
    (mlen,) = struct.unpack("<I", raw[:4])
    manifest = json.loads(raw[4 : 4 + mlen].decode("utf-8"))
    if manifest.get("format") != FORMAT:
        raise ValidationError(f"checkpoint {path}: format {manifest.get('format')!r}, expected {FORMAT!r}")
    blob = raw[4 + mlen :]
    arrays = {}
    for entry in manifest["entries"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=start).reshape(shape)
        arrays[entry["name"]] = arr.astype(np.float64)
    return arrays, manifest.get("extra", {})
