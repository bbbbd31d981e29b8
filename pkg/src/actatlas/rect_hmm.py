"""Layer-chained hidden Markov model with rectified-Gaussian emissions.

Generative story per example: a path of hidden words (h^1, ..., h^L) is
drawn from the transition tables, a pre-rectification Gaussian vector y^l
is drawn per layer given h^l, and the observed activation is
x^l = max(y^l, 0). The zero observations therefore carry the censored
mass Phi(-mu/sigma); positive observations carry the Gaussian density.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr, logsumexp
from scipy.stats import norm

from .errors import AtlasError, ConfigError
from .gmm import SIGMA_FLOOR, init_gmm

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class RectHmm:
    log_t1: np.ndarray        # (K^1,)
    log_trans: list           # log_trans[l] for l>=1: (K^{l+1}, K^l), columns normalized
    mus: list                 # per layer (K^l, D^l)
    sigmas: list              # per layer (K^l, D^l)
    layer_ids: list

    @property
    def num_layers(self):
        return len(self.mus)

    @property
    def k_per_layer(self):
        return [m.shape[0] for m in self.mus]

    def validate(self):
        if abs(np.exp(logsumexp(self.log_t1)) - 1.0) > 1e-9:
            raise AtlasError("initial distribution does not sum to 1")
        for t in self.log_trans:
            colsums = np.exp(logsumexp(t, axis=0))
            if np.max(np.abs(colsums - 1.0)) > 1e-9:
                raise AtlasError("transition column does not sum to 1")
        for s in self.sigmas:
            if np.any(s < SIGMA_FLOOR - 1e-12):
                raise AtlasError("sigma below floor")


@dataclass
class LayerPath:
    states: tuple
    log_joint: float      # max_H log P(H, X)
    log_posterior: float  # max_H log P(H | X)


def rg_log_emission(mu, sigma, x):
    """Log density/mass of a rectified Gaussian at x >= 0.

    Positive x: Gaussian log pdf. x == 0: log Phi(-mu/sigma), the censored
    mass. Broadcasts elementwise; sum over dimensions for a diagonal model.
    """
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0):
        raise AtlasError("negative post-ReLU activation")
    logpdf = -0.5 * ((x - mu) / sigma) ** 2 - np.log(sigma) - 0.5 * _LOG_2PI
    return np.where(x > 0, logpdf, log_ndtr(-mu / sigma))


def censored_moments(mu, sigma):
    """First/second moments of y ~ N(mu, sigma^2) conditioned on y <= 0.

    Uses log_ndtr so the Mills ratio stays finite far in the tail.
    """
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    beta = -mu / sigma
    h = np.exp(norm.logpdf(beta) - log_ndtr(beta))  # phi(beta) / Phi(beta)
    m1 = mu - sigma * h
    var = sigma**2 * (1.0 - beta * h - h * h)
    return m1, np.maximum(var, 0.0) + m1**2


def layer_log_emissions(model, layer, xs):
    """Per-example emission log densities for one layer, shape (N, K^l)."""
    mu = model.mus[layer]
    sigma = model.sigmas[layer]
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 2 or xs.shape[1] != mu.shape[1]:
        raise ConfigError(f"layer {layer}: dimension mismatch {xs.shape}")
    if np.any(xs < 0):
        raise AtlasError("negative post-ReLU activation")
    x = xs[:, None, :]  # (N, 1, D)
    logpdf = -0.5 * ((x - mu) / sigma) ** 2 - np.log(sigma) - 0.5 * _LOG_2PI
    contrib = np.where(x > 0, logpdf, log_ndtr(-mu / sigma))
    return contrib.sum(axis=2)


def _check_example(model, xs):
    if len(xs) != model.num_layers:
        raise ConfigError("wrong number of layer activations")
    return [np.atleast_2d(np.asarray(x, dtype=np.float64)) for x in xs]


def forward_backward_batch(model, xs):
    """Batched forward-backward. xs: list of (N, D^l) arrays.

    Returns (gammas, xis, loglik): per-layer posteriors (N, K^l), pairwise
    posteriors xis[l] (N, K^{l+1}, K^l) for the transition into layer l+1,
    and per-example log-likelihood (N,). Everything in log/probability
    space with log-sum-exp.
    """
    ems = [layer_log_emissions(model, l, xs[l]) for l in range(model.num_layers)]
    n = ems[0].shape[0]
    alphas = [ems[0] + model.log_t1]
    for l in range(1, model.num_layers):
        prev = alphas[-1]
        tmp = prev[:, None, :] + model.log_trans[l - 1][None, :, :]
        alphas.append(ems[l] + logsumexp(tmp, axis=2))
    loglik = logsumexp(alphas[-1], axis=1)
    betas = [np.zeros_like(ems[-1])]
    for l in range(model.num_layers - 2, -1, -1):
        nxt = betas[0] + ems[l + 1]  # (N, K^{l+1})
        tmp = nxt[:, :, None] + model.log_trans[l][None, :, :]
        betas.insert(0, logsumexp(tmp, axis=1))
    gammas = [np.exp(a + b - loglik[:, None]) for a, b in zip(alphas, betas)]
    xis = []
    for l in range(model.num_layers - 1):
        tmp = (alphas[l][:, None, :] + model.log_trans[l][None, :, :]
               + (ems[l + 1] + betas[l + 1])[:, :, None]
               - loglik[:, None, None])
        xis.append(np.exp(tmp))
    return gammas, xis, loglik


def forward_backward(model, xs):
    """Single-example forward-backward; see forward_backward_batch."""
    xs = _check_example(model, xs)
    gammas, xis, loglik = forward_backward_batch(model, xs)
    return [g[0] for g in gammas], [x[0] for x in xis], float(loglik[0])


def viterbi(model, xs) -> LayerPath:
    """Exact MAP word path; ties broken to the lowest index."""
    xs = _check_example(model, xs)
    ems = [layer_log_emissions(model, l, xs[l])[0] for l in range(model.num_layers)]
    delta = ems[0] + model.log_t1
    alpha = delta.copy()  # sum-product forward pass for the normalizer
    back = []
    for l in range(1, model.num_layers):
        tmp = delta[None, :] + model.log_trans[l - 1]  # (K^l, K^{l-1})
        back.append(np.argmax(tmp, axis=1))
        delta = ems[l] + np.max(tmp, axis=1)
        alpha = ems[l] + logsumexp(alpha[None, :] + model.log_trans[l - 1],
                                   axis=1)
    last = int(np.argmax(delta))
    log_joint = float(delta[last])
    states = [last]
    for bp in reversed(back):
        states.append(int(bp[states[-1]]))
    states.reverse()
    loglik = float(logsumexp(alpha))
    return LayerPath(tuple(states), log_joint, log_joint - loglik)


def init_hmm(layer_columns, k_per_layer, seed, layer_ids=None):
    """Emissions from init_gmm per layer; transitions start uniform."""
    mus, sigmas = [], []
    for i, cols in enumerate(layer_columns):
        g = init_gmm(cols, k_per_layer[i], seed + i)
        mus.append(g.mu)
        sigmas.append(g.sigma)
    log_t1 = np.full(k_per_layer[0], -np.log(k_per_layer[0]))
    log_trans = [np.full((k_per_layer[l + 1], k_per_layer[l]),
                         -np.log(k_per_layer[l + 1]))
                 for l in range(len(k_per_layer) - 1)]
    ids = list(layer_ids) if layer_ids is not None else [str(i) for i in range(len(mus))]
    return RectHmm(log_t1, log_trans, mus, sigmas, ids)


def _clamp_inputs(xs):
    out = []
    for x in xs:
        x = np.asarray(x, dtype=np.float64)
        if np.any(x < 0):
            warnings.warn("negative activations clamped to 0 on ingestion")
            x = np.maximum(x, 0.0)
        out.append(x)
    return out


def _emission_stats(x, w, mu, sigma):
    """Censored sufficient statistics for one layer.

    x: (N, D) observations, w: (N, K) posteriors. Positive observations
    contribute themselves; zeros contribute the truncated-normal moments
    at the current parameters.
    """
    pos = x > 0
    m1c, m2c = censored_moments(mu, sigma)  # (K, D)
    wz = w.T @ (~pos).astype(np.float64)    # (K, D) censored weight
    s0 = w.sum(axis=0)
    s1 = w.T @ (x * pos) + wz * m1c
    s2 = w.T @ (x**2 * pos) + wz * m2c
    return s0, s1, s2


def _emission_update(s0, s1, s2):
    mu = s1 / s0[:, None]
    var = s2 / s0[:, None] - mu**2
    sigma = np.maximum(np.sqrt(np.maximum(var, 0.0)), SIGMA_FLOOR)
    return mu, sigma


def _log_normalize_columns(counts):
    counts = np.maximum(counts, 1e-300)
    return np.log(counts) - np.log(counts.sum(axis=0, keepdims=True))


def hmm_em_fit(model, xs, epochs=20, mode="batch", minibatch=64,
               step_exponent=0.7):
    """EM for the full chain; returns (model, per-epoch mean NLL).

    xs: list of per-layer activation arrays (N, D^l). Batch mode is exact
    EM over censored-Gaussian sufficient statistics; online mode keeps
    running averages with step gamma_n = n^-alpha and re-derives the
    parameters after every minibatch.
    """
    xs = _clamp_inputs(xs)
    n = xs[0].shape[0]
    if mode not in ("batch", "online"):
        raise ConfigError(f"unknown EM mode {mode!r}")
    nll_history = []
    if mode == "batch":
        for _ in range(epochs):
            gammas, xis, loglik = forward_backward_batch(model, xs)
            if not np.all(np.isfinite(loglik)):
                raise AtlasError("NaN encountered during HMM EM")
            nll_history.append(float(-np.mean(loglik)))
            log_t1 = np.log(np.maximum(gammas[0].mean(axis=0), 1e-300))
            log_t1 -= logsumexp(log_t1)
            log_trans = [_log_normalize_columns(xi.sum(axis=0)) for xi in xis]
            mus, sigmas = [], []
            for l in range(model.num_layers):
                s0, s1, s2 = _emission_stats(xs[l], gammas[l],
                                             model.mus[l], model.sigmas[l])
                mu, sigma = _emission_update(np.maximum(s0, 1e-300), s1, s2)
                mus.append(mu)
                sigmas.append(sigma)
            model = RectHmm(log_t1, log_trans, mus, sigmas, model.layer_ids)
        return model, nll_history
    # online
    run = None
    step = 0
    for _ in range(epochs):
        total = 0.0
        for lo in range(0, n, minibatch):
            batch = [x[lo:lo + minibatch] for x in xs]
            b = batch[0].shape[0]
            gammas, xis, loglik = forward_backward_batch(model, batch)
            total += float(-np.sum(loglik))
            stats = {
                "t1": gammas[0].mean(axis=0),
                "trans": [xi.sum(axis=0) / b for xi in xis],
                "em": [tuple(v / b for v in _emission_stats(
                    batch[l], gammas[l], model.mus[l], model.sigmas[l]))
                    for l in range(model.num_layers)],
            }
            step += 1
            gamma = step ** (-step_exponent)
            if run is None:
                run = stats
            else:
                run["t1"] = (1 - gamma) * run["t1"] + gamma * stats["t1"]
                run["trans"] = [(1 - gamma) * a + gamma * c
                                for a, c in zip(run["trans"], stats["trans"])]
                run["em"] = [tuple((1 - gamma) * a + gamma * c
                                   for a, c in zip(olds, news))
                             for olds, news in zip(run["em"], stats["em"])]
            log_t1 = np.log(np.maximum(run["t1"], 1e-300))
            log_t1 -= logsumexp(log_t1)
            log_trans = [_log_normalize_columns(t) for t in run["trans"]]
            mus, sigmas = [], []
            for s0, s1, s2 in run["em"]:
                mu, sigma = _emission_update(np.maximum(s0, 1e-300), s1, s2)
                mus.append(mu)
                sigmas.append(sigma)
            model = RectHmm(log_t1, log_trans, mus, sigmas, model.layer_ids)
        nll_history.append(total / n)
    return model, nll_history


def hmm_em_fit_store(model, store, layers, epochs=20, mode="batch",
                     minibatch=64, step_exponent=0.7):
    xs = [store.layer(lid).reshape(store.example_count, -1) for lid in layers]
    return hmm_em_fit(model, xs, epochs=epochs, mode=mode,
                      minibatch=minibatch, step_exponent=step_exponent)
