"""Co-occurrence counting and derived prior/transition estimates.

N(k, k') counts triples (image, upper position p, lower position q) with
upper word k at p, lower word k' at q, and q inside the receptive field
of p. Only valid (unclipped) window positions are counted; the offset
normalization is exact on interior positions.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AtlasError, ConfigError, LabelsRequiredError
from .geometry import window


@dataclass
class CoocModel:
    upper: str
    lower: str
    counts: np.ndarray  # (K_upper, K_lower) int64

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if np.any(self.counts < 0):
            raise AtlasError("negative co-occurrence count")

    @property
    def eps(self):
        return 1e-9 * max(float(self.counts.sum()), 1.0)

    @property
    def dead_upper(self):
        return np.where(self.counts.sum(axis=1) == 0)[0]

    @property
    def dead_lower(self):
        return np.where(self.counts.sum(axis=0) == 0)[0]


def _as_grids(assignments):
    """Normalize assignments to (N, H, W); global layers become (N, 1, 1)."""
    a = np.asarray(assignments, dtype=np.int64)
    if a.ndim == 1:
        return a[:, None, None]
    if a.ndim == 3:
        return a
    raise ConfigError(f"assignment grids must be (N,) or (N, H, W), got {a.shape}")


def count_cooccurrence(upper_assign, lower_assign, fm, images=None,
                       k_upper=None, k_lower=None):
    """Build a CoocModel from hard assignments under a FieldMap."""
    up = _as_grids(upper_assign)
    low = _as_grids(lower_assign)
    if up.shape[1:] != fm.upper_shape or low.shape[1:] != fm.lower_shape:
        raise ConfigError(
            f"assignment grids {up.shape[1:]}/{low.shape[1:]} do not match "
            f"field map {fm.upper_shape}/{fm.lower_shape}")
    ku = int(k_upper if k_upper is not None else up.max() + 1)
    kl = int(k_lower if k_lower is not None else low.max() + 1)
    if images is None:
        images = range(up.shape[0])
    counts = np.zeros((ku, kl), dtype=np.int64)
    windows = {}
    for py in range(fm.upper_shape[0]):
        for px in range(fm.upper_shape[1]):
            qs, _ = window(fm, (py, px))
            windows[(py, px)] = (np.array([q[0] for q in qs], dtype=np.intp),
                                 np.array([q[1] for q in qs], dtype=np.intp))
    for n in images:
        ug, lg = up[n], low[n]
        for (py, px), (qy, qx) in windows.items():
            k = ug[py, px]
            np.add.at(counts[k], lg[qy, qx], 1)
    return CoocModel("", "", counts)


def priors(model: CoocModel):
    """Smoothed word priors (upper from row sums, lower from column sums)."""
    total = float(model.counts.sum())
    if total == 0:
        raise AtlasError("all-zero co-occurrence counts")
    eps = model.eps
    rows = model.counts.sum(axis=1).astype(np.float64)
    cols = model.counts.sum(axis=0).astype(np.float64)
    upper = (rows + eps) / (total + len(rows) * eps)
    lower = (cols + eps) / (total + len(cols) * eps)
    return upper, lower


def transitions(model: CoocModel):
    """Smoothed P(lower word | upper word) rows; returns (table, zero_rows).

    Rows with no support become uniform and are flagged so the miner can
    skip dead words.
    """
    counts = model.counts.astype(np.float64)
    row_tot = counts.sum(axis=1)
    zero_rows = row_tot == 0
    eps = model.eps
    table = (counts + eps) / (row_tot + counts.shape[1] * eps)[:, None]
    if np.any(zero_rows):
        table[zero_rows] = 1.0 / counts.shape[1]
    return table, np.where(zero_rows)[0]


def log_tables(model: CoocModel):
    """(log upper prior, log lower prior, log transition rows)."""
    pu, pl = priors(model)
    table, _ = transitions(model)
    return np.log(pu), np.log(pl), np.log(table)


def neighbor_classes(store, cls, max_neighbors):
    """Class scope set: cls plus the classes the network confuses it with.

    Neighbors are classes c != cls with at least one validation example of
    true class cls predicted as c, ordered by confusion count.
    """
    y = store.labels()
    yhat = store.predictions()
    mask = y == cls
    if not np.any(mask):
        return [int(cls)]
    conf = np.bincount(yhat[mask], minlength=store.num_classes)
    conf[cls] = 0
    order = [int(c) for c in np.argsort(-conf, kind="stable") if conf[c] > 0]
    return [int(cls)] + order[:max_neighbors]
