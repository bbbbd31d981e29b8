"""Writer for the activation-store container format.

Directory layout:
    manifest.atlas            JSON manifest
    layers/<id>.actd          per-layer activation blob (f32)
    labels.actd               i64 labels (optional)
    predictions.actd          i64 argmax predictions (optional)

Blob wire format, little-endian:
    magic "ACTD" | version u32 | dtype u32 (0=f32, 1=i64) | rank u32
    | one u64 extent per dimension | raw scalars, row-major.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"ACTD"
FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.atlas"

_DTYPES = {"f32": ("<f4", 0), "i64": ("<i8", 1)}


def write_blob_file(arr, path):
    """Serialize one array as a blob file; dtype chosen from the array."""
    arr = np.asarray(arr)
    dtype = "i64" if np.issubdtype(arr.dtype, np.integer) else "f32"
    np_dtype, code = _DTYPES[dtype]
    if arr.ndim == 0 or any(d < 1 for d in arr.shape):
        raise ValueError(f"cannot serialize array of shape {arr.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<III", FORMAT_VERSION, code, arr.ndim))
        f.write(struct.pack("<" + "Q" * arr.ndim, *arr.shape))
        f.write(np.ascontiguousarray(arr, dtype=np_dtype).tobytes())


def write_manifest(root, example_count, num_classes, layer_records,
                   has_labels, has_predictions, geometry=None):
    manifest = {
        "version": FORMAT_VERSION,
        "example_count": int(example_count),
        "num_classes": int(num_classes),
        "layers": layer_records,
        "has_labels": bool(has_labels),
        "has_predictions": bool(has_predictions),
    }
    if geometry is not None:
        manifest["geometry"] = geometry
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / MANIFEST_NAME, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
