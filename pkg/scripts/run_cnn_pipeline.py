#!/usr/bin/env python3
"""End-to-end conv pipeline on a synthetic planted store.

Samples a planted 4-class store, trains per-layer dictionaries, counts
co-occurrences and mines one inference graph per class. All artifacts
land under --workdir.
"""
import argparse
import sys
from pathlib import Path

from actatlas.cli import main as cli


def run(args):
    cli(args, standalone_mode=False)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--workdir", default="cnn_run", help="output directory")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n", type=int, default=200, help="examples to sample")
    ap.add_argument("--z", type=int, default=3, help="words kept per layer")
    ns = ap.parse_args()

    work = Path(ns.workdir)
    store, bundle = str(work / "store"), str(work / "bundle")
    run(["synth", "--family", "planted-cooc", "--out", store,
         "--n", str(ns.n), "--classes", "4", "--words-per-class", "4",
         "--grid", "8,8", "--seed", str(ns.seed)])
    run(["fit-gmm", "--store", store, "--bundle", bundle, "--layer", "low",
         "--k", "16", "--epochs", "20", "--seed", str(ns.seed)])
    run(["fit-gmm", "--store", store, "--bundle", bundle, "--layer", "high",
         "--k", "4", "--epochs", "20", "--seed", str(ns.seed)])
    run(["fit-gmm", "--store", store, "--bundle", bundle, "--layer", "out",
         "--fixed"])
    run(["assign", "--store", store, "--bundle", bundle])
    run(["cooccur", "--store", store, "--bundle", bundle])
    for cls in range(4):
        run(["mine", "--store", store, "--bundle", bundle,
             "--class", str(cls), "--z", str(ns.z)])
        run(["reps", "--store", store, "--bundle", bundle,
             "--layer", "high", "--cluster", str(cls)])
    run(["simmat", "--store", store, "--bundle", bundle, "--layer", "low"])
    print(f"done: graphs and reports in {bundle}")


if __name__ == "__main__":
    sys.exit(main())
