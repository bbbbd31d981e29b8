"""Diagonal-covariance Gaussian mixture dictionaries over activation columns.

A layer dictionary assigns every activation column to one of K "visual
words" (mixture components). Dictionaries are trained either generatively
(EM, batch or online with running-average sufficient statistics) or
discriminatively (histogram classifier under cross-entropy, minibatch
gradient descent on all parameters).
"""
from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import AtlasError, ConfigError
from .util import thread_count

SIGMA_FLOOR = 1e-3
_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class LayerGmm:
    layer_id: str
    log_pi: np.ndarray  # (K,)
    mu: np.ndarray      # (K, D)
    sigma: np.ndarray   # (K, D), standard deviations
    trainable: bool = True

    def __post_init__(self):
        self.log_pi = np.asarray(self.log_pi, dtype=np.float64)
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)

    @property
    def k(self):
        return self.log_pi.shape[0]

    @property
    def d(self):
        return self.mu.shape[1]

    def validate(self):
        if abs(np.exp(logsumexp(self.log_pi)) - 1.0) > 1e-9:
            raise AtlasError("mixture weights do not sum to 1")
        if np.any(self.sigma < SIGMA_FLOOR - 1e-12):
            raise AtlasError("sigma below floor")
        for arr in (self.log_pi, self.mu, self.sigma):
            if not np.all(np.isfinite(arr)):
                raise AtlasError("non-finite GMM parameter")


@dataclass
class HistClassifier:
    w: np.ndarray  # (M, K)
    b: np.ndarray  # (M,)

    @classmethod
    def zeros(cls, m, k):
        return cls(np.zeros((m, k)), np.zeros(m))


def fixed_output_gmm(num_classes, layer_id="output"):
    """The non-trainable output-layer dictionary: one word per class.

    Means are the one-hot class indicators with a constant sigma of 0.1
    and uniform weights.
    """
    m = int(num_classes)
    return LayerGmm(layer_id, np.full(m, -np.log(m)), np.eye(m),
                    np.full((m, m), 0.1), trainable=False)


def init_gmm(columns, k, seed, layer_id=""):
    """Initialize a dictionary from a sample of activation columns.

    Means are K distinct randomly selected columns; the per-dimension
    variance is computed over 1000 random columns and shared by all
    components; weights start uniform.
    """
    columns = np.asarray(columns, dtype=np.float64)
    n = columns.shape[0]
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    uniq = np.unique(columns, axis=0)
    if uniq.shape[0] < k:
        raise ConfigError(f"K={k} exceeds the {uniq.shape[0]} distinct columns")
    idx = rng.choice(uniq.shape[0], size=k, replace=False)
    means = uniq[np.sort(idx)]
    vidx = rng.choice(n, size=min(1000, n), replace=False)
    var = np.var(columns[vidx], axis=0)
    if np.any(var < SIGMA_FLOOR**2):
        warnings.warn("zero-variance dimension clamped to sigma floor")
    sigma = np.maximum(np.sqrt(var), SIGMA_FLOOR)
    return LayerGmm(layer_id, np.full(k, -np.log(k)), means,
                    np.tile(sigma, (k, 1)))


def component_log_densities(gmm, columns):
    """Per-column, per-component Gaussian log density, shape (N, K)."""
    columns = np.asarray(columns, dtype=np.float64)
    if columns.ndim != 2 or columns.shape[1] != gmm.d:
        raise ConfigError(
            f"column dimension {columns.shape} incompatible with D={gmm.d}")
    inv_var = 1.0 / gmm.sigma**2  # (K, D)
    quad = (
        columns**2 @ inv_var.T
        - 2.0 * (columns @ (gmm.mu * inv_var).T)
        + np.sum(gmm.mu**2 * inv_var, axis=1)
    )
    return -0.5 * quad - np.sum(np.log(gmm.sigma), axis=1) - 0.5 * gmm.d * _LOG_2PI


def joint_log_densities(gmm, columns):
    return component_log_densities(gmm, columns) + gmm.log_pi


def responsibilities(gmm, columns):
    """P(word k | column), rows summing to 1; log-sum-exp stabilized."""
    lj = joint_log_densities(gmm, columns)
    return np.exp(lj - logsumexp(lj, axis=1, keepdims=True))


def assign(gmm, columns):
    """Hard word assignment: argmax responsibility, ties to the lowest index."""
    return np.argmax(joint_log_densities(gmm, columns), axis=1)


def mean_nll(gmm, columns):
    """Mean negative log-likelihood per column."""
    return float(-np.mean(logsumexp(joint_log_densities(gmm, columns), axis=1)))


def _m_step(gmm, s0, s1, s2, n_total):
    """Parameters from (responsibility sums, weighted sums, weighted squares).

    Components with negligible support are re-seeded later by the caller.
    """
    weights = s0 / s0.sum()
    mu = s1 / s0[:, None]
    var = s2 / s0[:, None] - mu**2
    sigma = np.maximum(np.sqrt(np.maximum(var, 0.0)), SIGMA_FLOOR)
    with np.errstate(divide="ignore"):
        log_pi = np.log(weights)
    return LayerGmm(gmm.layer_id, log_pi, mu, sigma, gmm.trainable)


def _reseed_empty(gmm, columns, s0, n_total):
    """Re-seed components whose epoch responsibility mass is ~zero."""
    dead = np.where(s0 < 1e-6 * n_total)[0]
    if dead.size == 0:
        return gmm
    ll = logsumexp(joint_log_densities(gmm, columns), axis=1)
    order = np.argsort(ll)
    mu = gmm.mu.copy()
    log_pi = gmm.log_pi.copy()
    for rank, k in enumerate(dead):
        mu[k] = columns[order[rank % columns.shape[0]]]
        log_pi[k] = -np.log(gmm.k)
    log_pi -= logsumexp(log_pi)
    return LayerGmm(gmm.layer_id, log_pi, mu, gmm.sigma.copy(), gmm.trainable)


def _e_step_chunk(gmm, chunk):
    lj = joint_log_densities(gmm, chunk)
    norm = logsumexp(lj, axis=1, keepdims=True)
    r = np.exp(lj - norm)
    return float(-np.sum(norm)), r.sum(axis=0), r.T @ chunk, r.T @ chunk**2


def _batch_e_step(gmm, columns):
    """Full-data sufficient statistics; chunked across ATLAS_THREADS workers.

    Partials merge in chunk order, so results are reproducible for a
    fixed thread setting.
    """
    workers = thread_count()
    if workers <= 1 or columns.shape[0] < 2 * workers:
        return _e_step_chunk(gmm, columns)
    chunks = np.array_split(columns, workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(lambda c: _e_step_chunk(gmm, c), chunks))
    nll = sum(p[0] for p in parts)
    s0 = sum(p[1] for p in parts)
    s1 = sum(p[2] for p in parts)
    s2 = sum(p[3] for p in parts)
    return nll, s0, s1, s2


def fit_em(gmm, columns, epochs=20, mode="batch", minibatch=256,
           step_exponent=0.7):
    """EM on raw columns; returns (trained gmm, per-epoch mean NLL).

    Batch mode is exact EM (NLL non-increasing). Online mode keeps
    running averages of the sufficient statistics with step size
    gamma_n = n^-alpha and re-derives parameters after every minibatch.
    """
    columns = np.asarray(columns, dtype=np.float64)
    n = columns.shape[0]
    if n == 0:
        raise ConfigError("empty layer: no columns to fit")
    if mode not in ("batch", "online"):
        raise ConfigError(f"unknown EM mode {mode!r}")
    if mode == "online" and not (0.5 < step_exponent <= 1.0):
        raise ConfigError("step_exponent must lie in (0.5, 1]")
    nll_history = []
    if mode == "batch":
        for _ in range(epochs):
            nll_sum, s0, s1, s2 = _batch_e_step(gmm, columns)
            nll_history.append(nll_sum / n)
            if not np.all(np.isfinite(s1)):
                raise AtlasError("NaN encountered during EM")
            gmm = _m_step(gmm, np.maximum(s0, 1e-300), s1, s2, n)
            gmm = _reseed_empty(gmm, columns, s0, n)
        return gmm, nll_history
    # online
    a0 = a1 = a2 = None
    step = 0
    for _ in range(epochs):
        epoch_nll = []
        for lo in range(0, n, minibatch):
            batch = columns[lo:lo + minibatch]
            lj = joint_log_densities(gmm, batch)
            norm = logsumexp(lj, axis=1, keepdims=True)
            epoch_nll.append(float(-np.sum(norm)))
            r = np.exp(lj - norm)
            b0 = r.mean(axis=0)
            b1 = r.T @ batch / batch.shape[0]
            b2 = r.T @ batch**2 / batch.shape[0]
            step += 1
            gamma = step ** (-step_exponent)
            if a0 is None:
                a0, a1, a2 = b0, b1, b2
            else:
                a0 = (1 - gamma) * a0 + gamma * b0
                a1 = (1 - gamma) * a1 + gamma * b1
                a2 = (1 - gamma) * a2 + gamma * b2
            gmm = _m_step(gmm, np.maximum(a0, 1e-300), a1, a2, 1.0)
        nll_history.append(sum(epoch_nll) / n)
    return gmm, nll_history


def em_fit(gmm, store, layer, epochs=20, minibatch=256, mode="batch",
           step_exponent=0.7):
    """fit_em over all columns of a store layer."""
    return fit_em(gmm, store.columns(layer), epochs=epochs, mode=mode,
                  minibatch=minibatch, step_exponent=step_exponent)


# -- discriminative training ---------------------------------------------


def _forward_hist(gmm, batch):
    """batch: (B, P, D) columns. Returns (resp (B,P,K), hist (B,K))."""
    b, p, d = batch.shape
    lj = joint_log_densities(gmm, batch.reshape(b * p, d)).reshape(b, p, -1)
    r = np.exp(lj - logsumexp(lj, axis=2, keepdims=True))
    return r, r.mean(axis=1)


def discriminative_forward(gmm, clf, batch, labels):
    """Cross-entropy loss of the histogram classifier on one minibatch."""
    r, hist = _forward_hist(gmm, batch)
    logits = hist @ clf.w.T + clf.b
    logp = logits - logsumexp(logits, axis=1, keepdims=True)
    loss = float(-np.mean(logp[np.arange(len(labels)), labels]))
    return loss, r, hist, np.exp(logp)


def discriminative_gradients(gmm, clf, batch, labels):
    """Analytic minibatch gradients of the mean cross-entropy.

    Parameterization: mixture weights through softmax logits a (so the
    simplex invariant is maintained), sigma through log sigma. Gradients
    never touch the activation data itself.
    """
    batch = np.asarray(batch, dtype=np.float64)
    bsz, p, d = batch.shape
    loss, r, hist, probs = discriminative_forward(gmm, clf, batch, labels)
    dlogits = probs.copy()
    dlogits[np.arange(bsz), labels] -= 1.0
    dlogits /= bsz
    dw = dlogits.T @ hist
    db = dlogits.sum(axis=0)
    g = dlogits @ clf.w  # (B, K): dL/dHist
    # backprop through per-position softmax, averaged into the histogram
    rg = np.einsum("bpk,bk->bp", r, g)
    dz = r * (g[:, None, :] - rg[:, :, None]) / p  # (B, P, K)
    da = dz.sum(axis=(0, 1))  # rows of dz are softmax-tangent, so this is exact
    x = batch.reshape(bsz * p, d)
    dzf = dz.reshape(bsz * p, -1)
    dz_sum = dzf.sum(axis=0)
    inv_var = 1.0 / gmm.sigma**2
    sx = dzf.T @ x     # (K, D)
    sxx = dzf.T @ x**2
    dmu = (sx - dz_sum[:, None] * gmm.mu) * inv_var
    dlogsigma = (sxx - 2.0 * gmm.mu * sx + dz_sum[:, None] * gmm.mu**2) * inv_var \
        - dz_sum[:, None]
    return loss, {"pi_logits": da, "mu": dmu, "log_sigma": dlogsigma,
                  "w": dw, "b": db}


def discriminative_fit(gmm, clf, store, layer, epochs=30, minibatch=32,
                       learning_rate=0.1, seed=0):
    """Joint SGD on dictionary and histogram classifier.

    Returns (gmm, clf, per-epoch mean loss, per-epoch training error).
    """
    labels = store.labels()
    info = store.layers[layer]
    arr = store.layer(layer).astype(np.float64)
    cols = arr.reshape(arr.shape[0], -1, info.dim)  # (N, P, D)
    n = cols.shape[0]
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    losses, errors = [], []
    for _ in range(epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for lo in range(0, n, minibatch):
            sel = order[lo:lo + minibatch]
            loss, grads = discriminative_gradients(gmm, clf, cols[sel], labels[sel])
            if not np.isfinite(loss):
                raise AtlasError("NaN loss during discriminative training")
            epoch_loss += loss * len(sel)
            if learning_rate != 0.0 and gmm.trainable:
                a = gmm.log_pi - grads["pi_logits"] * learning_rate
                log_pi = a - logsumexp(a)
                mu = gmm.mu - grads["mu"] * learning_rate
                sigma = np.maximum(
                    np.exp(np.log(gmm.sigma) - grads["log_sigma"] * learning_rate),
                    SIGMA_FLOOR)
                gmm = LayerGmm(gmm.layer_id, log_pi, mu, sigma, gmm.trainable)
            if learning_rate != 0.0:
                clf = HistClassifier(clf.w - grads["w"] * learning_rate,
                                     clf.b - grads["b"] * learning_rate)
        losses.append(epoch_loss / n)
        errors.append(hist_classifier_error(gmm, clf, store, layer))
    return gmm, clf, losses, errors


def hist_classifier_error(gmm, clf, store, layer):
    """Fraction of examples whose histogram-classifier argmax misses the label."""
    labels = store.labels()
    info = store.layers[layer]
    arr = store.layer(layer).astype(np.float64)
    cols = arr.reshape(arr.shape[0], -1, info.dim)
    _, hist = _forward_hist(gmm, cols)
    pred = np.argmax(hist @ clf.w.T + clf.b, axis=1)
    return float(np.mean(pred != labels))


def top_m_examples(gmm, store, layer, cluster, m=6):
    """The m occurrences of a word with the highest responsibility.

    Occurrences are positions assigned to the word. Ranked by
    responsibility, then component log density (so a K=1 dictionary ranks
    by likelihood), then (example, position) ascending.
    """
    if not (0 <= cluster < gmm.k):
        raise ConfigError(f"cluster {cluster} out of range for K={gmm.k}")
    info = store.layers[layer]
    cols = store.columns(layer)
    per_example = int(np.prod(info.grid))
    lj = joint_log_densities(gmm, cols)
    norm = logsumexp(lj, axis=1)
    hard = np.argmax(lj, axis=1)
    occ = np.where(hard == cluster)[0]
    resp = np.exp(lj[occ, cluster] - norm[occ])
    dens = lj[occ, cluster]
    order = np.lexsort((occ, -dens, -resp))[:m]
    out = []
    for i in order:
        flat = occ[i]
        example, pos = divmod(int(flat), per_example)
        position = divmod(pos, info.grid[1]) if info.kind == "conv" else (0, 0)
        out.append((example, position, float(resp[i])))
    return out
