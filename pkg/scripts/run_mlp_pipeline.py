#!/usr/bin/env python3
"""End-to-end MLP pipeline on a synthetic rectified-Gaussian chain.

Samples a two-layer store, fits the layer-chained HMM, prints the MAP
word path of a few examples and writes a decision-junction report for
every first-layer cluster.
"""
import argparse
import sys
from pathlib import Path

from actatlas.cli import main as cli


def run(args):
    cli(args, standalone_mode=False)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--workdir", default="mlp_run", help="output directory")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n", type=int, default=1000)
    ap.add_argument("--k", type=int, default=3, help="words per layer")
    ns = ap.parse_args()

    work = Path(ns.workdir)
    store, bundle = str(work / "store"), str(work / "bundle")
    run(["synth", "--family", "rect-hmm", "--out", store, "--n", str(ns.n),
         "--layers", "3,3", "--dims", "4,4", "--separation", "3",
         "--seed", str(ns.seed)])
    run(["fit-hmm", "--store", store, "--bundle", bundle,
         "--layers", "fc1,fc2", "--k", str(ns.k), "--epochs", "30",
         "--seed", str(ns.seed)])
    run(["assign", "--store", store, "--bundle", bundle])
    for example in range(3):
        run(["path", "--store", store, "--bundle", bundle,
             "--example", str(example)])
    for cluster in range(ns.k):
        run(["junction", "--store", store, "--bundle", bundle,
             "--layer", "0", "--cluster", str(cluster), "--method", "llr"])
    print(f"done: paths and junction reports in {bundle}")


if __name__ == "__main__":
    sys.exit(main())
