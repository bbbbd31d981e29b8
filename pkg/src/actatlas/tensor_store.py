"""Binary tensor container and on-disk activation store.

Blob wire format (all little-endian, fixed regardless of host):
    magic "ACTD" | version u32 | dtype code u32 | rank u32 | extents u64 each
    | raw scalars, row-major.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BlobFormatError, LabelsRequiredError, ManifestError

MAGIC = b"ACTD"
FORMAT_VERSION = 1

_DTYPE_CODE = {"f32": 0, "i64": 1}
_CODE_DTYPE = {v: k for k, v in _DTYPE_CODE.items()}
_NP_DTYPE = {"f32": np.dtype("<f4"), "i64": np.dtype("<i8")}

MANIFEST_NAME = "manifest.atlas"


@dataclass
class TensorBlob:
    dtype: str
    dims: tuple
    data: np.ndarray  # flat, row-major

    def __post_init__(self):
        if self.dtype not in _DTYPE_CODE:
            raise BlobFormatError("unknown dtype", self.dtype)
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) == 0:
            raise BlobFormatError("dims mismatch", "dims must be nonempty")
        if any(d < 1 for d in self.dims):
            raise BlobFormatError("dims mismatch", "all extents must be >= 1")
        self.data = np.ascontiguousarray(self.data, dtype=_NP_DTYPE[self.dtype]).ravel()
        if int(np.prod(self.dims)) != self.data.size:
            raise BlobFormatError(
                "dims mismatch",
                f"product(dims)={int(np.prod(self.dims))} != buffer length {self.data.size}",
            )

    @classmethod
    def from_array(cls, arr):
        arr = np.asarray(arr)
        dtype = "i64" if np.issubdtype(arr.dtype, np.integer) else "f32"
        return cls(dtype, arr.shape, arr.ravel())

    def asarray(self):
        return self.data.reshape(self.dims)


def write_blob(blob: TensorBlob, sink) -> int:
    """Serialize a blob to a binary stream; returns the byte count written."""
    header = MAGIC
    header += struct.pack("<III", FORMAT_VERSION, _DTYPE_CODE[blob.dtype], len(blob.dims))
    header += struct.pack("<" + "Q" * len(blob.dims), *blob.dims)
    payload = blob.data.astype(_NP_DTYPE[blob.dtype], copy=False).tobytes()
    sink.write(header)
    sink.write(payload)
    return len(header) + len(payload)


def _read_exact(source, n, what):
    buf = source.read(n)
    if len(buf) != n:
        raise BlobFormatError("truncated", f"while reading {what}")
    return buf


def read_blob_header(source):
    """Parse a blob header; returns (dtype, dims, payload_bytes)."""
    magic = _read_exact(source, 4, "magic")
    if magic != MAGIC:
        raise BlobFormatError("bad magic", repr(magic))
    version, code, rank = struct.unpack("<III", _read_exact(source, 12, "header"))
    if version != FORMAT_VERSION:
        raise BlobFormatError("unknown version", str(version))
    if code not in _CODE_DTYPE:
        raise BlobFormatError("unknown dtype", str(code))
    if rank == 0:
        raise BlobFormatError("dims mismatch", "rank 0")
    dims = struct.unpack("<" + "Q" * rank, _read_exact(source, 8 * rank, "extents"))
    if any(d < 1 for d in dims):
        raise BlobFormatError("dims mismatch", "zero extent")
    dtype = _CODE_DTYPE[code]
    payload = int(np.prod(dims)) * _NP_DTYPE[dtype].itemsize
    return dtype, dims, payload


def read_blob(source) -> TensorBlob:
    """Inverse of write_blob."""
    dtype, dims, payload = read_blob_header(source)
    raw = _read_exact(source, payload, "payload")
    data = np.frombuffer(raw, dtype=_NP_DTYPE[dtype]).copy()
    return TensorBlob(dtype, dims, data)


def write_array(arr, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        return write_blob(TensorBlob.from_array(arr), f)


def read_array(path):
    with open(path, "rb") as f:
        return read_blob(f).asarray()


@dataclass
class LayerInfo:
    id: str
    kind: str  # "conv" | "global"
    shape: tuple  # per-example shape: (H, W, D) for conv, (D,) for global

    @property
    def dim(self):
        return int(self.shape[-1])

    @property
    def grid(self):
        return tuple(int(s) for s in self.shape[:2]) if self.kind == "conv" else (1, 1)


class ActivationStore:
    """Read-only view over a dumped dataset split.

    Layer tensors are loaded lazily and cached; blobs are immutable after
    load so the cache may be shared across threads.
    """

    def __init__(self, root):
        self.root = Path(root)
        mpath = self.root / MANIFEST_NAME
        if not mpath.exists():
            raise ManifestError(f"missing {MANIFEST_NAME} in {self.root}")
        with open(mpath) as f:
            self.manifest = json.load(f)
        for key in ("version", "example_count", "num_classes", "layers"):
            if key not in self.manifest:
                raise ManifestError(f"manifest missing field {key!r}")
        self.example_count = int(self.manifest["example_count"])
        self.num_classes = int(self.manifest["num_classes"])
        self.layers = {}
        for rec in self.manifest["layers"]:
            kind = rec["kind"]
            if kind not in ("conv", "global"):
                raise ManifestError(f"layer {rec['id']}: unknown kind {kind!r}")
            shape = tuple(int(s) for s in rec["shape"])
            if kind == "conv" and len(shape) != 3:
                raise ManifestError(f"layer {rec['id']}: conv shape must be (H, W, D)")
            if kind == "global" and len(shape) != 1:
                raise ManifestError(f"layer {rec['id']}: global shape must be (D,)")
            self.layers[rec["id"]] = LayerInfo(rec["id"], kind, shape)
        self._cache = {}
        self._validate()

    # -- validation ------------------------------------------------------

    def _blob_path(self, layer_id):
        return self.root / "layers" / f"{layer_id}.actd"

    def _validate(self):
        for info in self.layers.values():
            path = self._blob_path(info.id)
            if not path.exists():
                raise ManifestError(f"missing layer file {path}")
            with open(path, "rb") as f:
                dtype, dims, _ = read_blob_header(f)
            expect = (self.example_count,) + info.shape
            if tuple(dims) != expect:
                if dims[0] != self.example_count:
                    raise ManifestError(
                        f"layer {info.id}: example-count mismatch "
                        f"(blob {dims[0]} vs manifest {self.example_count})"
                    )
                raise ManifestError(
                    f"layer {info.id}: shape/manifest mismatch {dims} vs {expect}"
                )
            if dtype != "f32":
                raise ManifestError(f"layer {info.id}: activations must be f32")
        for name, flag in (("labels", "has_labels"), ("predictions", "has_predictions")):
            if self.manifest.get(flag):
                path = self.root / f"{name}.actd"
                if not path.exists():
                    raise ManifestError(f"missing {name}.actd")
                with open(path, "rb") as f:
                    dtype, dims, _ = read_blob_header(f)
                if dtype != "i64" or tuple(dims) != (self.example_count,):
                    raise ManifestError(f"{name}: length mismatch {dims}")

    # -- access ----------------------------------------------------------

    @property
    def has_labels(self):
        return bool(self.manifest.get("has_labels"))

    @property
    def has_predictions(self):
        return bool(self.manifest.get("has_predictions"))

    def layer(self, layer_id):
        if layer_id not in self.layers:
            raise ManifestError(f"unknown layer {layer_id!r}")
        if layer_id not in self._cache:
            self._cache[layer_id] = read_array(self._blob_path(layer_id))
        return self._cache[layer_id]

    def _class_array(self, name, flag):
        if not self.manifest.get(flag):
            raise LabelsRequiredError(f"labels required: store has no {name}")
        key = f"__{name}"
        if key not in self._cache:
            arr = read_array(self.root / f"{name}.actd")
            if arr.min() < 0 or arr.max() >= self.num_classes:
                raise ManifestError(f"{name}: values outside [0, num_classes)")
            self._cache[key] = arr
        return self._cache[key]

    def labels(self):
        return self._class_array("labels", "has_labels")

    def predictions(self):
        return self._class_array("predictions", "has_predictions")

    def geometry_pairs(self):
        return self.manifest.get("geometry", {}).get("pairs", [])

    def columns(self, layer_id):
        """All activation columns of a layer, shape (n_columns, D).

        Conv layers contribute H*W columns per example, global layers one.
        """
        arr = self.layer(layer_id)
        return arr.reshape(-1, self.layers[layer_id].dim)


def write_store(root, layers, num_classes, labels=None, predictions=None, geometry=None):
    """Write a store directory.

    layers: list of (id, kind, array) with array shaped (N, H, W, D) or (N, D).
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    counts = {arr.shape[0] for _, _, arr in layers}
    if len(counts) != 1:
        raise ManifestError(f"inconsistent example counts across layers: {counts}")
    n = counts.pop()
    recs = []
    for lid, kind, arr in layers:
        recs.append({"id": lid, "kind": kind, "shape": list(arr.shape[1:])})
        write_array(np.asarray(arr, dtype=np.float32), root / "layers" / f"{lid}.actd")
    manifest = {
        "version": FORMAT_VERSION,
        "example_count": int(n),
        "num_classes": int(num_classes),
        "layers": recs,
        "has_labels": labels is not None,
        "has_predictions": predictions is not None,
    }
    if geometry is not None:
        manifest["geometry"] = geometry
    if labels is not None:
        write_array(np.asarray(labels, dtype=np.int64), root / "labels.actd")
    if predictions is not None:
        write_array(np.asarray(predictions, dtype=np.int64), root / "predictions.actd")
    with open(root / MANIFEST_NAME, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return ActivationStore(root)


def open_store(root) -> ActivationStore:
    return ActivationStore(root)
