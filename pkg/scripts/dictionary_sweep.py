#!/usr/bin/env python3
"""Held-out histogram-classifier error as a function of dictionary size.

Samples a planted store, splits it into train/test halves, and for each
K trains a generative dictionary plus a linear histogram classifier,
reporting the held-out error. Larger dictionaries should not hurt.
"""
import argparse
import sys
import tempfile
from pathlib import Path

from actatlas.gmm import (HistClassifier, LayerGmm, discriminative_fit,
                          fit_em, hist_classifier_error, init_gmm)
from actatlas.synth import SynthSpec, sample_store
from actatlas.tensor_store import write_store


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=400)
    ap.add_argument("--seed", type=int, default=17)
    ap.add_argument("--ks", default="2,4,8,16",
                    help="comma-separated dictionary sizes")
    ns = ap.parse_args()
    ks = [int(t) for t in ns.ks.split(",")]

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        spec = SynthSpec("planted-cooc", seed=ns.seed, n_examples=ns.n,
                         num_classes=4, words_per_class=4, grid=(8, 8),
                         separation=3.0)
        store, _ = sample_store(spec, tmp / "full")
        arr = store.layer("low")
        labels = store.labels()
        split = (3 * ns.n) // 4
        train = write_store(tmp / "train", [("low", "conv", arr[:split])],
                            num_classes=4, labels=labels[:split])
        test = write_store(tmp / "test", [("low", "conv", arr[split:])],
                           num_classes=4, labels=labels[split:])
        print(f"{'K':>4}  {'train err':>9}  {'test err':>8}")
        for k in ks:
            cols = train.columns("low")
            g = init_gmm(cols, k, seed=0, layer_id="low")
            g, _ = fit_em(g, cols, epochs=15)
            g = LayerGmm("low", g.log_pi, g.mu, g.sigma, trainable=False)
            clf = HistClassifier.zeros(4, k)
            g, clf, _, errs = discriminative_fit(
                g, clf, train, "low", epochs=20, learning_rate=1.0, seed=0)
            err = hist_classifier_error(g, clf, test, "low")
            print(f"{k:>4}  {errs[-1]:>9.3f}  {err:>8.3f}")


if __name__ == "__main__":
    sys.exit(main())
