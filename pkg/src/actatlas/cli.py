"""Command-line pipeline: synth -> fit -> assign -> cooccur -> mine -> reports.

All intermediate state lives on disk (store directory + bundle directory);
every subcommand is deterministic given identical inputs and --seed.
Exit codes: 0 success, 1 runtime/model error, 2 unknown subcommand or bad
usage, 3 invalid configuration.
"""
from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import gmm as gmm_mod
from . import miner, reports, synth
from .bundle import ModelBundle
from .cooccur import count_cooccurrence, neighbor_classes
from .errors import AtlasError, ConfigError
from .geometry import field_map_for_pair
from .rect_hmm import hmm_em_fit_store, init_hmm, viterbi
from .tensor_store import open_store


def _load_config(path):
    if not path:
        return {}
    try:
        with open(path) as f:
            cfg = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}")
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    return cfg


def pick(cfg, key, flag, default=None):
    """Flag value, else config value, else default."""
    if flag is not None:
        return flag
    if key in cfg:
        return cfg[key]
    return default


def require(value, name):
    if value is None:
        raise ConfigError(f"missing required option --{name.replace('_', '-')}")
    return value


def run_guard(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as e:
            click.echo(f"error[config]: {e}", err=True)
            sys.exit(3)
        except AtlasError as e:
            click.echo(f"error[runtime]: {e}", err=True)
            sys.exit(1)
    return wrapper


@click.group()
def main():
    """Visual-word dictionaries and inference graphs for activation dumps."""


_common = [
    click.option("--store", "store_path", type=click.Path(), default=None),
    click.option("--bundle", "bundle_path", type=click.Path(), default=None),
    click.option("--config", "config_path", type=click.Path(), default=None),
    click.option("--seed", type=int, default=None),
]


def common_options(fn):
    for opt in reversed(_common):
        fn = opt(fn)
    return fn


def _open_bundle(path, seed):
    path = Path(path)
    if (path / "bundle.atlas").exists():
        return ModelBundle.open(path)
    return ModelBundle.create(path, seed=seed or 0)


@main.command("synth")
@common_options
@click.option("--family", type=click.Choice(["gmm", "rect-hmm", "planted-cooc"]),
              default=None)
@click.option("--out", "out_dir", type=click.Path(), default=None)
@click.option("--n", "n_examples", type=int, default=None)
@click.option("--dim", type=int, default=None)
@click.option("--components", type=int, default=None)
@click.option("--separation", type=float, default=None)
@click.option("--layers", "layer_sizes", default=None, help="e.g. 2,2")
@click.option("--dims", "layer_dims", default=None, help="e.g. 3,3")
@click.option("--classes", "num_classes", type=int, default=None)
@click.option("--words-per-class", type=int, default=None)
@click.option("--grid", default=None, help="e.g. 8,8")
@click.option("--purity", type=float, default=None)
@click.option("--noise", type=float, default=None)
@click.option("--truth-bundle", type=click.Path(), default=None)
@run_guard
def synth_cmd(store_path, bundle_path, config_path, seed, family, out_dir,
              n_examples, dim, components, separation, layer_sizes, layer_dims,
              num_classes, words_per_class, grid, purity, noise, truth_bundle):
    """Sample a synthetic store from a known ground-truth model."""
    cfg = _load_config(config_path)
    out_dir = require(pick(cfg, "out", out_dir, pick(cfg, "store", store_path)), "out")
    kwargs = {"family": require(pick(cfg, "family", family), "family"),
              "seed": int(pick(cfg, "seed", seed, 0))}
    for key, val in (("n_examples", n_examples), ("dim", dim),
                     ("components", components), ("separation", separation),
                     ("num_classes", num_classes),
                     ("words_per_class", words_per_class),
                     ("purity", purity), ("noise", noise)):
        v = pick(cfg, key, val)
        if v is not None:
            kwargs[key] = v
    for key, val in (("layer_sizes", layer_sizes), ("layer_dims", layer_dims),
                     ("grid", grid)):
        v = pick(cfg, key, val)
        if v is not None:
            kwargs[key] = tuple(int(t) for t in str(v).replace(",", " ").split()) \
                if isinstance(v, str) else tuple(v)
    spec = synth.SynthSpec(**kwargs)
    store, truth = synth.sample_store(spec, out_dir)
    if truth_bundle:
        synth.write_truth_bundle(truth, truth_bundle, seed=spec.seed)
    click.echo(f"synth: wrote {spec.family} store with "
               f"{store.example_count} examples to {out_dir}")


@main.command("fit-gmm")
@common_options
@click.option("--layer", default=None)
@click.option("--k", type=int, default=None)
@click.option("--loss", type=click.Choice(["generative", "discriminative"]),
              default=None)
@click.option("--em-mode", type=click.Choice(["batch", "online"]), default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--minibatch", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--step-exponent", type=float, default=None)
@click.option("--fixed", is_flag=True, default=False,
              help="install the fixed output-layer dictionary (K = num_classes)")
@run_guard
def fit_gmm_cmd(store_path, bundle_path, config_path, seed, layer, k, loss,
                em_mode, epochs, minibatch, lr, step_exponent, fixed):
    """Train (or install) a layer dictionary."""
    cfg = _load_config(config_path)
    store = open_store(require(pick(cfg, "store", store_path), "store"))
    seed = int(pick(cfg, "seed", seed, 0))
    layer = require(pick(cfg, "layer", layer), "layer")
    if layer not in store.layers:
        raise ConfigError(f"layer {layer!r} not in store")
    bundle = _open_bundle(require(pick(cfg, "bundle", bundle_path), "bundle"), seed)
    with bundle.lock():
        if fixed or pick(cfg, "fixed", None):
            g = gmm_mod.fixed_output_gmm(store.num_classes, layer)
            bundle.set_gmm(g)
            click.echo(f"fit-gmm: installed fixed output dictionary "
                       f"K={g.k} for layer {layer}")
            return
        k = int(require(pick(cfg, "k", k), "k"))
        if k < 1:
            raise ConfigError("K must be >= 1")
        epochs = int(pick(cfg, "epochs", epochs, 20))
        minibatch = int(pick(cfg, "minibatch", minibatch, 64))
        loss = pick(cfg, "loss", loss, "generative")
        cols = store.columns(layer)
        g = gmm_mod.init_gmm(cols, k, seed, layer_id=layer)
        if loss == "generative":
            mode = pick(cfg, "em_mode", em_mode, "batch")
            alpha = float(pick(cfg, "step_exponent", step_exponent, 0.7))
            g, nll = gmm_mod.fit_em(g, cols, epochs=epochs, mode=mode,
                                    minibatch=minibatch, step_exponent=alpha)
            bundle.set_gmm(g)
            click.echo(f"fit-gmm: layer {layer} K={k} loss=generative "
                       f"final NLL {nll[-1]:.6g}")
        else:
            rate = float(pick(cfg, "lr", lr, 0.1))
            clf = gmm_mod.HistClassifier.zeros(store.num_classes, k)
            g, clf, losses, errs = gmm_mod.discriminative_fit(
                g, clf, store, layer, epochs=epochs, minibatch=minibatch,
                learning_rate=rate, seed=seed)
            bundle.set_gmm(g)
            bundle.set_classifier(layer, clf)
            click.echo(f"fit-gmm: layer {layer} K={k} loss=discriminative "
                       f"final loss {losses[-1]:.6g} error {errs[-1]:.4f}")


@main.command("fit-hmm")
@common_options
@click.option("--layers", default=None, help="comma-separated layer ids")
@click.option("--k", default=None, help="per-layer K, comma-separated or single")
@click.option("--em-mode", type=click.Choice(["batch", "online"]), default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--minibatch", type=int, default=None)
@click.option("--step-exponent", type=float, default=None)
@run_guard
def fit_hmm_cmd(store_path, bundle_path, config_path, seed, layers, k, em_mode,
                epochs, minibatch, step_exponent):
    """Train the layer-chained rectified-Gaussian HMM."""
    cfg = _load_config(config_path)
    store = open_store(require(pick(cfg, "store", store_path), "store"))
    seed = int(pick(cfg, "seed", seed, 0))
    raw = require(pick(cfg, "layers", layers), "layers")
    layer_ids = raw.split(",") if isinstance(raw, str) else list(raw)
    for lid in layer_ids:
        if lid not in store.layers:
            raise ConfigError(f"layer {lid!r} not in store")
    raw_k = require(pick(cfg, "k", k), "k")
    ks = [int(t) for t in str(raw_k).split(",")]
    if len(ks) == 1:
        ks = ks * len(layer_ids)
    if len(ks) != len(layer_ids) or any(v < 1 for v in ks):
        raise ConfigError("per-layer K list must match layers and be >= 1")
    bundle = _open_bundle(require(pick(cfg, "bundle", bundle_path), "bundle"), seed)
    with bundle.lock():
        cols = [store.columns(lid) for lid in layer_ids]
        model = init_hmm(cols, ks, seed, layer_ids=layer_ids)
        model, nll = hmm_em_fit_store(
            model, store, layer_ids,
            epochs=int(pick(cfg, "epochs", epochs, 20)),
            mode=pick(cfg, "em_mode", em_mode, "batch"),
            minibatch=int(pick(cfg, "minibatch", minibatch, 64)),
            step_exponent=float(pick(cfg, "step_exponent", step_exponent, 0.7)))
        bundle.set_hmm(model)
    click.echo(f"fit-hmm: layers {','.join(layer_ids)} K={ks} "
               f"final NLL {nll[-1]:.6g}")


@main.command("assign")
@common_options
@click.option("--layer", "layers", multiple=True,
              help="layer id (repeatable); default: all dictionaries in bundle")
@run_guard
def assign_cmd(store_path, bundle_path, config_path, seed, layers):
    """Hard word assignments for store columns under the bundle dictionaries."""
    cfg = _load_config(config_path)
    store = open_store(require(pick(cfg, "store", store_path), "store"))
    bundle = _open_bundle(require(pick(cfg, "bundle", bundle_path), "bundle"), seed)
    hmm_rec = bundle.manifest.get("hmm")
    hmm_layers = hmm_rec["layers"] if hmm_rec else []
    targets = list(layers) or pick(cfg, "layers", None) \
        or sorted(set(bundle.gmm_layers()) | set(hmm_layers))
    if not targets:
        raise ConfigError("no dictionaries in bundle; run fit-gmm/fit-hmm first")
    with bundle.lock():
        hmm_targets = [lid for lid in targets
                       if lid not in bundle.manifest["gmms"] and lid in hmm_layers]
        if hmm_targets:
            model = bundle.hmm()
            xs = [store.layer(lid).reshape(store.example_count, -1)
                  for lid in model.layer_ids]
            paths = np.stack([viterbi(model, [x[i] for x in xs]).states
                              for i in range(store.example_count)])
            for lid in hmm_targets:
                bundle.set_assign(lid, paths[:, model.layer_ids.index(lid)],
                                  store_tag=str(store.root))
        for lid in targets:
            if lid in hmm_targets:
                continue
            g = bundle.gmm(lid)
            info = store.layers[lid]
            hard = gmm_mod.assign(g, store.columns(lid))
            shape = (store.example_count,) + (info.grid if info.kind == "conv" else ())
            bundle.set_assign(lid, hard.reshape(shape), store_tag=str(store.root))
    click.echo(f"assign: wrote assignments for {len(targets)} layer(s)")


@main.command("cooccur")
@common_options
@run_guard
def cooccur_cmd(store_path, bundle_path, config_path, seed):
    """Co-occurrence counts for every geometry pair with assignments."""
    cfg = _load_config(config_path)
    store = open_store(require(pick(cfg, "store", store_path), "store"))
    bundle = _open_bundle(require(pick(cfg, "bundle", bundle_path), "bundle"), seed)
    pairs = store.geometry_pairs()
    if not pairs:
        raise ConfigError("store manifest declares no geometry pairs")
    done = 0
    with bundle.lock():
        for pair in pairs:
            upper, lower = pair["upper"], pair["lower"]
            if upper not in bundle.manifest["assigns"] \
                    or lower not in bundle.manifest["assigns"]:
                continue
            fm = field_map_for_pair(store, upper, lower)
            model = count_cooccurrence(
                bundle.assign(upper), bundle.assign(lower), fm,
                k_upper=bundle.manifest["gmms"][upper]["k"],
                k_lower=bundle.manifest["gmms"][lower]["k"])
            model.upper, model.lower = upper, lower
            bundle.set_cooc(model)
            done += 1
    if done == 0:
        raise ConfigError("no layer pair had assignments for both layers")
    click.echo(f"cooccur: counted {done} layer pair(s)")


@main.command("neighbors")
@common_options
@click.option("--class", "cls", type=int, default=None)
@click.option("--max-neighbors", type=int, default=None)
@run_guard
def neighbors_cmd(store_path, bundle_path, config_path, seed, cls, max_neighbors):
    """Class scope set: the class plus its confusion neighbors."""
    cfg = _load_config(config_path)
    store = open_store(require(pick(cfg, "store", store_path), "store"))
    cls = int(require(pick(cfg, "class", cls), "class"))
    cap = int(pick(cfg, "max_neighbors", max_neighbors, store.num_classes))
    scope = neighbor_classes(store, cls, cap)
    click.echo(f"neighbors: class {cls} scope {scope}")


@main.command("mine")
@common_options
@click.option("--class", "cls", type=int, default=None)
@click.option("--image", type=int, default=None)
@click.option("--z", type=int, default=None)
@click.option("--no-heatmaps", is_flag=True, default=False)
@run_guard
def mine_cmd(store_path, bundle_path, config_path, seed, cls, image, z,
             no_heatmaps):
    """Build and save an inference graph for a class or a single image."""
    cfg = _load_config(config_path)
    store = open_store(require(pick(cfg, "store", store_path), "store"))
    bundle = _open_bundle(require(pick(cfg, "bundle", bundle_path), "bundle"), seed)
    cls = pick(cfg, "class", cls)
    image = pick(cfg, "image", image)
    if (cls is None) == (image is None):
        raise ConfigError("exactly one of --class / --image is required")
    z = int(pick(cfg, "z", z, 3))
    if z < 1:
        raise ConfigError("Z must be >= 1")
    scope = ("class", int(cls)) if cls is not None else ("image", int(image))
    graph = miner.build_graph(bundle, store, scope, z,
                              with_heatmaps=not no_heatmaps)
    tag = f"{scope[0]}{scope[1]}"
    graph.save_json(bundle.root / f"graph_{tag}.json")
    graph.save_dot(bundle.root / f"graph_{tag}.dot")
    click.echo(f"mine: graph_{tag}.json with {len(graph.nodes)} nodes, "
               f"{len(graph.edges)} edges")


@main.command("path")
@common_options
@click.option("--example", type=int, default=None)
@run_guard
def path_cmd(store_path, bundle_path, config_path, seed, example):
    """Viterbi MAP word path of one example under the bundle HMM."""
    cfg = _load_config(config_path)
    store = open_store(require(pick(cfg, "store", store_path), "store"))
    bundle = _open_bundle(require(pick(cfg, "bundle", bundle_path), "bundle"), seed)
    i = int(require(pick(cfg, "example", example), "example"))
    model = bundle.hmm()
    xs = [store.layer(lid)[i].reshape(-1) for lid in model.layer_ids]
    p = viterbi(model, xs)
    doc = {"example": i, "states": list(p.states),
           "log_joint": p.log_joint, "log_posterior": p.log_posterior}
    with open(bundle.root / f"path_{i}.json", "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
    click.echo(f"path: example {i} -> {p.states} "
               f"(log posterior {p.log_posterior:.4f})")


@main.command("junction")
@common_options
@click.option("--layer", type=int, default=None, help="HMM layer index (0-based)")
@click.option("--cluster", type=int, default=None)
@click.option("--m", type=int, default=None)
@click.option("--method", type=click.Choice(["l2", "llr"]), default=None)
@run_guard
def junction_cmd(store_path, bundle_path, config_path, seed, layer, cluster,
                 m, method):
    """Decision-junction report for one MLP cluster."""
    cfg = _load_config(config_path)
    store = open_store(require(pick(cfg, "store", store_path), "store"))
    bundle = _open_bundle(require(pick(cfg, "bundle", bundle_path), "bundle"), seed)
    layer = int(require(pick(cfg, "layer", layer), "layer"))
    cluster = int(require(pick(cfg, "cluster", cluster), "cluster"))
    model = bundle.hmm()
    xs = [store.layer(lid).reshape(store.example_count, -1)
          for lid in model.layer_ids]
    j = reports.junction(model, xs, layer, cluster,
                         m=int(pick(cfg, "m", m, 3)),
                         method=pick(cfg, "method", method, "l2"))
    doc = {
        "layer": j.layer, "cluster": j.cluster, "method": j.method,
        "llr_fallback": j.llr_fallback,
        "sub_clusters": {str(a): v for a, v in j.sub_clusters.items()},
        "transition_probs": {str(a): v for a, v in j.transition_probs.items()},
        "coords": {str(a): np.asarray(c).tolist() for a, c in j.coords.items()},
        "representatives": {str(a): v for a, v in j.representatives.items()},
    }
    out = bundle.root / f"junction_{layer}_{cluster}.json"
    with open(out, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
    click.echo(f"junction: layer {layer} cluster {cluster} -> "
               f"{len(j.sub_clusters)} sub-cluster(s)")


@main.command("reps")
@common_options
@click.option("--layer", default=None)
@click.option("--cluster", type=int, default=None)
@click.option("--m", type=int, default=None)
@run_guard
def reps_cmd(store_path, bundle_path, config_path, seed, layer, cluster, m):
    """Top-m representative occurrences of a visual word."""
    cfg = _load_config(config_path)
    store = open_store(require(pick(cfg, "store", store_path), "store"))
    bundle = _open_bundle(require(pick(cfg, "bundle", bundle_path), "bundle"), seed)
    layer = require(pick(cfg, "layer", layer), "layer")
    cluster = int(require(pick(cfg, "cluster", cluster), "cluster"))
    g = bundle.gmm(layer)
    top = gmm_mod.top_m_examples(g, store, layer, cluster,
                                 m=int(pick(cfg, "m", m, 6)))
    doc = {"layer": layer, "cluster": cluster,
           "representatives": [
               {"example": e, "position": list(p), "responsibility": r}
               for e, p, r in top]}
    out = bundle.root / f"reps_{layer}_{cluster}.json"
    with open(out, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
    click.echo(f"reps: layer {layer} cluster {cluster} -> {len(top)} occurrence(s)")


@main.command("simmat")
@common_options
@click.option("--layer", default=None)
@run_guard
def simmat_cmd(store_path, bundle_path, config_path, seed, layer):
    """Cluster-center distance matrix and dominant-class statistics."""
    from .tensor_store import write_array
    cfg = _load_config(config_path)
    store = open_store(require(pick(cfg, "store", store_path), "store"))
    bundle = _open_bundle(require(pick(cfg, "bundle", bundle_path), "bundle"), seed)
    layer = require(pick(cfg, "layer", layer), "layer")
    hmm_rec = bundle.manifest.get("hmm")
    if layer in bundle.manifest["gmms"]:
        means = bundle.gmm(layer).mu
    elif hmm_rec and layer in hmm_rec["layers"]:
        means = bundle.hmm().mus[hmm_rec["layers"].index(layer)]
    else:
        raise ConfigError(f"no model parameters for layer {layer!r}")
    rep = reports.similarity_report(means, bundle.assign(layer),
                                    store.labels(), layer_id=layer)
    write_array(rep.distances, bundle.root / f"simmat_{layer}.actd")
    doc = {"layer": layer,
           "order": rep.order.tolist(),
           "dominant_class": rep.dominant_class.tolist(),
           "dominant_fraction": [round(float(v), 12)
                                 for v in rep.dominant_fraction],
           "average_dominant_pct": round(rep.average_dominant_pct, 12),
           "matrix_file": f"simmat_{layer}.actd"}
    with open(bundle.root / f"simmat_{layer}.json", "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
    click.echo(f"simmat: layer {layer} avg dominant class "
               f"{rep.average_dominant_pct:.1f}%")


@main.command("export-dot")
@common_options
@click.option("--graph", "graph_name", default=None,
              help="graph JSON file name inside the bundle directory")
@run_guard
def export_dot_cmd(store_path, bundle_path, config_path, seed, graph_name):
    """Re-render an existing graph JSON as DOT."""
    cfg = _load_config(config_path)
    bundle = _open_bundle(require(pick(cfg, "bundle", bundle_path), "bundle"), seed)
    name = require(pick(cfg, "graph", graph_name), "graph")
    path = bundle.root / name
    if not path.exists():
        raise ConfigError(f"no such graph file {path}")
    with open(path) as f:
        doc = json.load(f)
    graph = miner.InferenceGraph(doc["scope"], doc["nodes"], doc["edges"])
    out = path.with_suffix(".dot")
    graph.save_dot(out)
    click.echo(f"export-dot: wrote {out.name}")


if __name__ == "__main__":
    main()
