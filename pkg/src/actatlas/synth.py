"""Synthetic stores sampled from known ground-truth models.

Three families: "gmm" (columns from a known mixture), "rect-hmm" (the
three-step chain: path -> Gaussian y -> x = max(y, 0)), and
"planted-cooc" (two conv layers plus an output layer with a planted
explainer word per class). All randomness comes from a counter-based
Philox generator keyed by the spec seed, so stores are byte-identical
under a fixed seed.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bundle import ModelBundle
from .errors import ConfigError
from .gmm import LayerGmm, fixed_output_gmm
from .rect_hmm import RectHmm
from .tensor_store import write_store


@dataclass
class SynthSpec:
    family: str                    # gmm | rect-hmm | planted-cooc
    seed: int = 0
    n_examples: int = 1000
    # gmm family
    dim: int = 4
    components: int = 3
    separation: float = 3.0
    # rect-hmm family
    layer_sizes: tuple = (2, 2)
    layer_dims: tuple = (3, 3)
    # planted-cooc family
    num_classes: int = 4
    words_per_class: int = 4
    grid: tuple = (8, 8)
    purity: float = 0.9
    noise: float = 0.1

    def rng(self):
        return np.random.Generator(np.random.Philox(key=int(self.seed)))


def _sample_gmm(spec, out_dir):
    rng = spec.rng()
    k, d, n = spec.components, spec.dim, spec.n_examples
    pi = rng.dirichlet(np.full(k, 10.0))
    mu = rng.normal(size=(k, d)) * spec.separation
    sigma = rng.uniform(0.8, 1.2, size=(k, d))
    comp = rng.choice(k, size=n, p=pi)
    x = mu[comp] + sigma[comp] * rng.normal(size=(n, d))
    store = write_store(out_dir, [("fc1", "global", x.astype(np.float32))],
                        num_classes=1)
    truth = {"gmm": LayerGmm("fc1", np.log(pi), mu, sigma),
             "components": comp}
    return store, truth


def _sample_rect_hmm(spec, out_dir):
    rng = spec.rng()
    ks = list(spec.layer_sizes)
    ds = list(spec.layer_dims)
    if len(ks) != len(ds):
        raise ConfigError("layer_sizes and layer_dims must have equal length")
    n = spec.n_examples
    t1 = rng.dirichlet(np.full(ks[0], 5.0))
    trans = [np.stack([rng.dirichlet(np.full(ks[l + 1], 5.0))
                       for _ in range(ks[l])], axis=1)
             for l in range(len(ks) - 1)]
    mus, sigmas = [], []
    for k, d in zip(ks, ds):
        base = rng.uniform(-1.0, 1.0, size=(k, d))
        shift = (spec.separation / np.sqrt(d)) * np.arange(k)[:, None]
        mus.append(base + shift)
        sigmas.append(np.ones((k, d)))
    paths = np.empty((n, len(ks)), dtype=np.int64)
    paths[:, 0] = rng.choice(ks[0], size=n, p=t1)
    for l in range(1, len(ks)):
        u = rng.random(n)
        cdf = np.cumsum(trans[l - 1], axis=0)  # (K^l, K^{l-1})
        paths[:, l] = np.argmax(u[None, :] < cdf[:, paths[:, l - 1]], axis=0)
    layers = []
    for l, (k, d) in enumerate(zip(ks, ds)):
        y = mus[l][paths[:, l]] + sigmas[l][paths[:, l]] * rng.normal(size=(n, d))
        layers.append((f"fc{l + 1}", "global", np.maximum(y, 0.0).astype(np.float32)))
    geometry = {"pairs": [{"upper": f"fc{l + 2}", "lower": f"fc{l + 1}",
                           "stages": []} for l in range(len(ks) - 1)]}
    store = write_store(out_dir, layers, num_classes=1, geometry=geometry)
    model = RectHmm(np.log(t1), [np.log(t) for t in trans], mus, sigmas,
                    [f"fc{l + 1}" for l in range(len(ks))])
    return store, {"hmm": model, "paths": paths}


def _sample_planted(spec, out_dir):
    rng = spec.rng()
    m, w = spec.num_classes, spec.words_per_class
    h, wid = spec.grid
    n = spec.n_examples
    d = 8
    k_low = m * w
    class_centers = rng.normal(size=(m, d)) * (2.0 * spec.separation)
    offsets = rng.normal(size=(m, w, d)) * (0.5 * spec.separation)
    low_means = (class_centers[:, None, :] + offsets).reshape(k_low, d)
    high_means = rng.normal(size=(m, d)) * (2.0 * spec.separation)
    word_weights = 0.5 ** np.arange(w)
    word_weights /= word_weights.sum()
    labels = np.arange(n) % m
    up_assign = np.empty((n, h, wid), dtype=np.int64)
    low_assign = np.empty((n, h, wid), dtype=np.int64)
    for i in range(n):
        c = labels[i]
        # upper grid: the class word, with (1 - purity) flips to other words
        up = np.full((h, wid), c, dtype=np.int64)
        flip = rng.random((h, wid)) > spec.purity
        others = [j for j in range(m) if j != c]
        if others and flip.any():
            up[flip] = rng.choice(others, size=int(flip.sum()))
        # lower grid: class-specific word distribution, heaviest = explainer
        low = c * w + rng.choice(w, size=(h, wid), p=word_weights)
        flip = rng.random((h, wid)) > spec.purity
        if flip.any():
            low[flip] = rng.choice(k_low, size=int(flip.sum()))
        up_assign[i] = up
        low_assign[i] = low
    low_act = low_means[low_assign] + spec.noise * rng.normal(size=(n, h, wid, d))
    high_act = high_means[up_assign] + spec.noise * rng.normal(size=(n, h, wid, d))
    out_act = np.abs(0.01 * rng.normal(size=(n, m)))
    out_act[np.arange(n), labels] = 1.0
    geometry = {"pairs": [
        {"upper": "high", "lower": "low",
         "stages": [{"kernel": [3, 3], "stride": [1, 1], "padding": [1, 1]}]},
        {"upper": "out", "lower": "high", "stages": []},
    ]}
    store = write_store(
        out_dir,
        [("low", "conv", low_act.astype(np.float32)),
         ("high", "conv", high_act.astype(np.float32)),
         ("out", "global", out_act.astype(np.float32))],
        num_classes=m, labels=labels, predictions=labels, geometry=geometry)
    sig = max(spec.noise, 1e-2)
    truth = {
        "gmms": {
            "low": LayerGmm("low", np.full(k_low, -np.log(k_low)), low_means,
                            np.full((k_low, d), sig)),
            "high": LayerGmm("high", np.full(m, -np.log(m)), high_means,
                             np.full((m, d), sig)),
            "out": fixed_output_gmm(m, "out"),
        },
        "explainers": {c: c * w for c in range(m)},
        "upper_assign": up_assign,
        "lower_assign": low_assign,
        "labels": labels,
    }
    return store, truth


def sample_store(spec: SynthSpec, out_dir):
    """Write a store sampled from a known model; returns (store, truth)."""
    if spec.family == "gmm":
        return _sample_gmm(spec, out_dir)
    if spec.family == "rect-hmm":
        return _sample_rect_hmm(spec, out_dir)
    if spec.family == "planted-cooc":
        return _sample_planted(spec, out_dir)
    raise ConfigError(f"unknown synth family {spec.family!r}")


def write_truth_bundle(truth, path, seed=0):
    """Persist ground-truth parameters as a ModelBundle."""
    bundle = ModelBundle.create(path, seed=seed,
                                options={"source": "synth-ground-truth"})
    if "gmm" in truth:
        bundle.set_gmm(truth["gmm"])
    for g in truth.get("gmms", {}).values():
        bundle.set_gmm(g)
    if "hmm" in truth:
        bundle.set_hmm(truth["hmm"])
    return bundle
