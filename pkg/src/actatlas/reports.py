"""Companion analytics: decision junctions, LDA projections, cluster
similarity matrices and dominant-class statistics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import AtlasError, ConfigError
from .rect_hmm import layer_log_emissions, viterbi


def _fix_signs(basis):
    """Deterministic sign: first nonzero coordinate of each basis vector > 0."""
    basis = basis.copy()
    for j in range(basis.shape[1]):
        v = basis[:, j]
        nz = np.nonzero(np.abs(v) > 1e-12)[0]
        if nz.size and v[nz[0]] < 0:
            basis[:, j] = -v
    return basis


def scatter_matrices(groups):
    """Within/between-class scatter over groups of row vectors."""
    d = next(iter(groups.values())).shape[1]
    mean_all = np.mean(np.concatenate(list(groups.values())), axis=0)
    sw = np.zeros((d, d))
    sb = np.zeros((d, d))
    for x in groups.values():
        m = x.mean(axis=0)
        c = x - m
        sw += c.T @ c
        dm = (m - mean_all)[:, None]
        sb += x.shape[0] * (dm @ dm.T)
    return sw, sb


def lda_project(groups):
    """Two-dimensional multi-class Fisher projection.

    groups: dict label -> (n_i, D) arrays. Groups with fewer than two
    members are projected but excluded from scatter estimation. Returns
    (coords: dict label -> (n_i, 2), basis (D, 2)).
    """
    groups = {k: np.asarray(v, dtype=np.float64) for k, v in groups.items()}
    eligible = {k: v for k, v in groups.items() if v.shape[0] >= 2}
    if len(eligible) < 2:
        raise ConfigError("need at least 2 sub-clusters with >= 2 members")
    sw, sb = scatter_matrices(eligible)
    d = sw.shape[0]
    lam = 1e-4 * np.trace(sw) / d
    if lam <= 0:
        lam = 1e-8
    evals, evecs = scipy.linalg.eigh(sb, sw + lam * np.eye(d))
    basis = _fix_signs(evecs[:, ::-1][:, :2])
    coords = {k: v @ basis for k, v in groups.items()}
    return coords, basis


def fisher_criterion(basis, sw, sb, lam):
    """trace((B' (Sw + lam I) B)^-1 B' Sb B) for a (D, 2) basis."""
    a = basis.T @ (sw + lam * np.eye(sw.shape[0])) @ basis
    b = basis.T @ sb @ basis
    return float(np.trace(np.linalg.solve(a, b)))


@dataclass
class Junction:
    layer: int
    cluster: int
    sub_clusters: dict            # next-layer word -> list of example indices
    transition_probs: dict        # next-layer word -> P(h^{l+1} | h^l = k)
    coords: dict                  # next-layer word -> (n_i, 2) projected points
    representatives: dict         # next-layer word -> list of example indices
    method: str
    llr_fallback: bool = False


def _viterbi_assignments(model, xs):
    n = xs[0].shape[0]
    paths = np.empty((n, model.num_layers), dtype=np.int64)
    for i in range(n):
        paths[i] = viterbi(model, [x[i] for x in xs]).states
    return paths


def junction(model, xs, layer, cluster, m=3, method="l2", paths=None):
    """Decision-junction view of MLP cluster (layer, cluster).

    xs: per-layer activation arrays (N, D^l). Members of the cluster are
    grouped by their word in the next layer; representatives are either
    the m members closest to the sub-cluster mean (l2) or the m members
    with the highest worst-case log-likelihood ratio against sibling
    sub-clusters (llr), evaluated with the next layer's emission model.
    """
    if layer >= model.num_layers - 1:
        raise ConfigError("junction needs a consecutive modeled layer")
    if method not in ("l2", "llr"):
        raise ConfigError(f"unknown representative method {method!r}")
    if paths is None:
        paths = _viterbi_assignments(model, xs)
    members = np.where(paths[:, layer] == cluster)[0]
    if members.size == 0:
        raise AtlasError(f"cluster {cluster} empty on the evaluation split")
    next_words = paths[members, layer + 1]
    sub = {int(a): members[next_words == a].tolist()
           for a in np.unique(next_words)}
    # transition row of the HMM, restricted to observed sub-clusters
    row = np.exp(model.log_trans[layer][:, cluster])
    obs = sorted(sub)
    norm = sum(row[a] for a in obs)
    trans = {a: float(row[a] / norm) for a in obs}
    groups = {a: np.asarray([xs[layer][i] for i in idx]) for a, idx in sub.items()}
    try:
        coords, _ = lda_project(groups)
    except ConfigError:
        coords = {a: np.zeros((len(v), 2)) for a, v in sub.items()}
    llr_fallback = False
    reps = {}
    if method == "llr" and len(obs) < 2:
        method_used = "l2"
        llr_fallback = True
    else:
        method_used = method
    for a in obs:
        idx = np.asarray(sub[a])
        if method_used == "l2":
            x = groups[a]
            dist = np.linalg.norm(x - x.mean(axis=0), axis=1)
            order = np.lexsort((idx, dist))
        else:
            xnext = np.asarray([xs[layer + 1][i] for i in idx])
            ems = layer_log_emissions(model, layer + 1, xnext)  # (n, K^{l+1})
            others = [b for b in obs if b != a]
            llr = np.min(ems[:, [a]] - ems[:, others], axis=1)
            order = np.lexsort((idx, -llr))
        reps[a] = idx[order[:m]].tolist()
    return Junction(layer, cluster, sub, trans, coords, reps, method_used,
                    llr_fallback)


@dataclass
class SimilarityReport:
    layer_id: str
    distances: np.ndarray     # (K, K) Euclidean distances between centers
    dominant_class: np.ndarray
    dominant_fraction: np.ndarray
    order: np.ndarray         # clusters sorted by (dominant class, id)
    average_dominant_pct: float


def similarity_report(means, assignments, labels, layer_id=""):
    """Cluster-center distance matrix plus dominant-class statistics.

    For conv layers each spatial occurrence counts, labeled by its image
    label; assignments may be (N,) or (N, H, W).
    """
    means = np.asarray(means, dtype=np.float64)
    a = np.asarray(assignments, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if a.ndim > 1:
        per = int(np.prod(a.shape[1:]))
        flat_assign = a.reshape(-1)
        flat_labels = np.repeat(labels, per)
    else:
        flat_assign, flat_labels = a, labels
    k = means.shape[0]
    diff = means[:, None, :] - means[None, :, :]
    distances = np.sqrt(np.sum(diff**2, axis=2))
    dom = np.zeros(k, dtype=np.int64)
    frac = np.zeros(k)
    n_classes = int(flat_labels.max()) + 1 if flat_labels.size else 1
    for j in range(k):
        mask = flat_assign == j
        if not np.any(mask):
            dom[j], frac[j] = -1, 0.0
            continue
        counts = np.bincount(flat_labels[mask], minlength=n_classes)
        dom[j] = int(np.argmax(counts))
        frac[j] = counts[dom[j]] / counts.sum()
    order = np.lexsort((np.arange(k), dom))
    populated = dom >= 0
    avg = float(100.0 * np.mean(frac[populated])) if np.any(populated) else 0.0
    return SimilarityReport(layer_id, distances, dom, frac, order, avg)
