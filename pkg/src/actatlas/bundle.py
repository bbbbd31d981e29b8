"""On-disk bundle of trained model parameters and derived tables.

Layout: a directory with a `bundle.atlas` JSON manifest plus `.actd`
files (the tensor blob format) holding parameter arrays. A bundle is
written by one process at a time (advisory lock file); readers are free.
"""
from __future__ import annotations

import contextlib
import json
import os
from pathlib import Path

import numpy as np

from .cooccur import CoocModel
from .errors import AtlasError, ManifestError
from .gmm import HistClassifier, LayerGmm
from .rect_hmm import RectHmm
from .tensor_store import TensorBlob, read_blob, write_blob

MANIFEST_NAME = "bundle.atlas"
BUNDLE_VERSION = 1


def _write_blobs(path, arrays):
    with open(path, "wb") as f:
        for arr in arrays:
            write_blob(TensorBlob.from_array(np.asarray(arr)), f)


def _read_blobs(path, count):
    with open(path, "rb") as f:
        return [read_blob(f).asarray() for _ in range(count)]


class ModelBundle:
    def __init__(self, root, manifest):
        self.root = Path(root)
        self.manifest = manifest

    @classmethod
    def create(cls, root, seed=0, options=None):
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        manifest = {
            "version": BUNDLE_VERSION,
            "provenance": {"seed": int(seed), "options": options or {}},
            "gmms": {},
            "hmm": None,
            "classifiers": {},
            "coocs": {},
            "assigns": {},
        }
        bundle = cls(root, manifest)
        bundle._flush()
        return bundle

    @classmethod
    def open(cls, root):
        root = Path(root)
        mpath = root / MANIFEST_NAME
        if not mpath.exists():
            raise ManifestError(f"missing {MANIFEST_NAME} in {root}")
        with open(mpath) as f:
            return cls(root, json.load(f))

    def _flush(self):
        with open(self.root / MANIFEST_NAME, "w") as f:
            json.dump(self.manifest, f, indent=2, sort_keys=True)
            f.write("\n")

    @contextlib.contextmanager
    def lock(self):
        """Advisory single-writer lock on the bundle directory."""
        path = self.root / ".lock"
        try:
            fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise AtlasError(f"bundle {self.root} is locked by another writer")
        try:
            os.close(fd)
            yield self
        finally:
            path.unlink(missing_ok=True)

    # -- GMMs ------------------------------------------------------------

    def set_gmm(self, gmm: LayerGmm):
        fname = f"gmm_{gmm.layer_id}.actd"
        _write_blobs(self.root / fname, [gmm.log_pi, gmm.mu, gmm.sigma])
        self.manifest["gmms"][gmm.layer_id] = {
            "k": int(gmm.k), "d": int(gmm.d),
            "trainable": bool(gmm.trainable), "file": fname,
        }
        self._flush()

    def gmm(self, layer_id) -> LayerGmm:
        rec = self.manifest["gmms"].get(layer_id)
        if rec is None:
            raise ManifestError(f"bundle has no dictionary for layer {layer_id!r}")
        log_pi, mu, sigma = _read_blobs(self.root / rec["file"], 3)
        return LayerGmm(layer_id, log_pi, mu, sigma, trainable=rec["trainable"])

    def gmm_layers(self):
        return sorted(self.manifest["gmms"])

    # -- HMM -------------------------------------------------------------

    def set_hmm(self, model: RectHmm):
        arrays = [model.log_t1]
        arrays += list(model.log_trans)
        for mu, sigma in zip(model.mus, model.sigmas):
            arrays += [mu, sigma]
        _write_blobs(self.root / "hmm.actd", arrays)
        self.manifest["hmm"] = {
            "layers": list(model.layer_ids),
            "k": [int(k) for k in model.k_per_layer],
            "file": "hmm.actd",
        }
        self._flush()

    def hmm(self) -> RectHmm:
        rec = self.manifest["hmm"]
        if rec is None:
            raise ManifestError("bundle has no HMM")
        n_layers = len(rec["layers"])
        arrays = _read_blobs(self.root / rec["file"], 1 + (n_layers - 1) + 2 * n_layers)
        log_t1 = arrays[0]
        log_trans = arrays[1:n_layers]
        mus = arrays[n_layers::2]
        sigmas = arrays[n_layers + 1::2]
        return RectHmm(log_t1, log_trans, mus, sigmas, list(rec["layers"]))

    # -- classifiers -----------------------------------------------------

    def set_classifier(self, layer_id, clf: HistClassifier):
        fname = f"clf_{layer_id}.actd"
        _write_blobs(self.root / fname, [clf.w, clf.b])
        self.manifest["classifiers"][layer_id] = {"file": fname}
        self._flush()

    def classifier(self, layer_id) -> HistClassifier:
        rec = self.manifest["classifiers"].get(layer_id)
        if rec is None:
            raise ManifestError(f"no classifier for layer {layer_id!r}")
        w, b = _read_blobs(self.root / rec["file"], 2)
        return HistClassifier(w, b)

    # -- co-occurrence ---------------------------------------------------

    def set_cooc(self, model: CoocModel):
        key = f"{model.upper}__{model.lower}"
        fname = f"cooc_{key}.actd"
        _write_blobs(self.root / fname, [model.counts])
        self.manifest["coocs"][key] = {
            "upper": model.upper, "lower": model.lower, "file": fname,
        }
        self._flush()

    def cooc(self, upper, lower) -> CoocModel:
        rec = self.manifest["coocs"].get(f"{upper}__{lower}")
        if rec is None:
            raise ManifestError(f"no co-occurrence model for ({upper}, {lower})")
        (counts,) = _read_blobs(self.root / rec["file"], 1)
        return CoocModel(upper, lower, counts)

    def cooc_pairs(self):
        return [(rec["upper"], rec["lower"])
                for _, rec in sorted(self.manifest["coocs"].items())]

    # -- assignments -----------------------------------------------------

    def set_assign(self, layer_id, assignments, store_tag=""):
        fname = f"assign_{layer_id}.actd"
        _write_blobs(self.root / fname, [np.asarray(assignments, dtype=np.int64)])
        self.manifest["assigns"][layer_id] = {"file": fname, "store": store_tag}
        self._flush()

    def assign(self, layer_id):
        rec = self.manifest["assigns"].get(layer_id)
        if rec is None:
            raise ManifestError(f"no assignments for layer {layer_id!r}; run assign")
        (arr,) = _read_blobs(self.root / rec["file"], 1)
        return arr
