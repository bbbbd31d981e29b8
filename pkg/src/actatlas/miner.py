"""Maximum-likelihood node selection and inference-graph assembly.

A lower-layer word t explains an upper word s in proportion to
Q[t, s] * log(P(t | s) / P(t)): how often t occurs inside s's receptive
fields, times how surprising that is. The graph is built top-down from
the predicted class, keeping the Z best-scoring words per layer.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .cooccur import count_cooccurrence, log_tables, _as_grids
from .errors import AtlasError, ConfigError
from .geometry import field_map_for_pair, window


def word_counts(upper_assign, lower_assign, fm, omega, k_upper=None,
                k_lower=None):
    """Q[t, s]: occurrences of lower word t in receptive fields of upper
    word s, aggregated over the image set omega."""
    omega = list(omega)
    if not omega:
        raise ConfigError("empty image set")
    model = count_cooccurrence(upper_assign, lower_assign, fm, images=omega,
                               k_upper=k_upper, k_lower=k_lower)
    return model.counts.T.copy()


def score(counts, cooc, upper_words, t):
    """S(omega, S, t) for one lower word; natural log, smoothed estimates."""
    _, log_pl, log_tr = log_tables(cooc)
    return float(sum(counts[t, s] * (log_tr[s, t] - log_pl[t])
                     for s in upper_words))


def scores_all(counts, cooc, upper_words):
    """Selection scores for every lower word at once."""
    _, log_pl, log_tr = log_tables(cooc)
    ratio = log_tr - log_pl[None, :]  # (K_up, K_low)
    return np.array([
        sum(counts[t, s] * ratio[s, t] for s in upper_words)
        for t in range(counts.shape[0])
    ])


def image_word_locations(assignments, image, k):
    """Positions of image `image` assigned to word k, plus their fraction."""
    grid = _as_grids(assignments)[image]
    ys, xs = np.where(grid == k)
    positions = list(zip(ys.tolist(), xs.tolist()))
    return positions, len(positions) / grid.size


def edge_heatmap(upper_assign, lower_assign, fm, omega, s, t):
    """Per-offset empirical frequency of lower word t under upper word s.

    cell(o) = #{(n, p): up[p]=s, low[p+o]=t} / #{(n, p): up[p]=s, p+o valid};
    cells whose offset is never valid stay 0. Returns (matrix, flagged)
    where flagged marks an upper word absent from omega.
    """
    up = _as_grids(upper_assign)
    low = _as_grids(lower_assign)
    ey, ex = fm.extent
    hits = np.zeros((ey, ex))
    valid = np.zeros((ey, ex))
    hl, wl = fm.lower_shape
    present = False
    for n in omega:
        ug, lg = up[n], low[n]
        pys, pxs = np.where(ug == s)
        for py, px in zip(pys, pxs):
            present = True
            ay = fm.scale[0] * py + fm.origin[0]
            ax = fm.scale[1] * px + fm.origin[1]
            for dy in range(ey):
                qy = ay + dy
                if not 0 <= qy < hl:
                    continue
                for dx in range(ex):
                    qx = ax + dx
                    if 0 <= qx < wl:
                        valid[dy, dx] += 1
                        if lg[qy, qx] == t:
                            hits[dy, dx] += 1
    with np.errstate(invalid="ignore"):
        cells = np.where(valid > 0, hits / np.maximum(valid, 1), 0.0)
    return cells, not present


@dataclass
class InferenceGraph:
    scope: dict
    nodes: list = field(default_factory=list)   # dicts: layer, word, score, ...
    edges: list = field(default_factory=list)   # dicts: upper, lower, frequency, ...

    def to_dict(self):
        return {"scope": self.scope, "nodes": self.nodes, "edges": self.edges}

    def save_json(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    def to_dot(self):
        lines = ["digraph inference {", "  rankdir=TB;"]
        for node in self.nodes:
            nid = f"{node['layer']}_{node['word']}"
            label = f"{node['layer']}:{node['word']}"
            if node.get("score") is not None:
                label += f"\\nS={node['score']:.3g}"
            lines.append(f'  "{nid}" [label="{label}"];')
        for e in self.edges:
            if not e["drawn"]:
                continue
            uid = f"{e['upper_layer']}_{e['upper_word']}"
            lid = f"{e['lower_layer']}_{e['lower_word']}"
            color = "green" if e["significant"] else "black"
            label = f"{e['frequency']} | {e['log_ratio']:.3g}"
            lines.append(
                f'  "{uid}" -> "{lid}" [label="{label}", color={color}];')
        lines.append("}")
        return "\n".join(lines) + "\n"

    def save_dot(self, path):
        with open(path, "w") as f:
            f.write(self.to_dot())


def _layer_chain(bundle):
    """Order the co-occurrence pairs top-down, starting at the output layer."""
    pairs = bundle.cooc_pairs()
    if not pairs:
        raise ConfigError("bundle has no co-occurrence models")
    uppers = {u for u, _ in pairs}
    lowers = {l for _, l in pairs}
    tops = uppers - lowers
    if len(tops) != 1:
        raise ConfigError(f"cannot order layer pairs; top candidates: {tops}")
    chain = []
    cur = tops.pop()
    by_upper = dict(pairs)
    while cur in by_upper:
        nxt = by_upper[cur]
        chain.append((cur, nxt))
        cur = nxt
    return chain


def _occurrences(assign, omega, k):
    grids = _as_grids(assign)
    return int(sum(np.count_nonzero(grids[n] == k) for n in omega))


def build_graph(bundle, store, scope, z, with_heatmaps=True):
    """Run the top-down node-selection over all modeled layer pairs.

    scope: ("class", m) explains the images predicted as class m;
    ("image", i) explains the single example i. Selection at each layer
    takes the Z highest scores against the union of the words selected
    one layer up; edges are annotated pairwise.
    """
    kind, value = scope
    chain = _layer_chain(bundle)
    top_layer = chain[0][0]
    if kind == "class":
        preds = store.predictions()
        omega = [int(i) for i in np.where(preds == value)[0]]
        top_words = [int(value)]
    elif kind == "image":
        omega = [int(value)]
        top_assign = _as_grids(bundle.assign(top_layer))
        top_words = [int(top_assign[omega[0]].ravel()[0])]
    else:
        raise ConfigError(f"unknown scope kind {kind!r}")
    if not omega:
        raise AtlasError(f"empty image set for scope {scope}")

    graph = InferenceGraph(scope={"kind": kind, "value": int(value), "z": int(z),
                                  "omega_size": len(omega)})
    selected = top_words
    first_cooc = bundle.cooc(*chain[0])
    log_pu, _, _ = log_tables(first_cooc)
    for w in selected:
        graph.nodes.append({
            "layer": top_layer, "word": int(w), "score": None,
            "occurrences": _occurrences(bundle.assign(top_layer), omega, w),
            "log_prior": float(log_pu[w]),
        })
    for upper, lower in chain:
        fm = field_map_for_pair(store, upper, lower)
        cooc = bundle.cooc(upper, lower)
        up_assign = bundle.assign(upper)
        low_assign = bundle.assign(lower)
        ku, kl = cooc.counts.shape
        q = word_counts(up_assign, low_assign, fm, omega,
                        k_upper=ku, k_lower=kl)
        svec = scores_all(q, cooc, selected)
        svec = svec.astype(np.float64)
        svec[cooc.dead_lower] = -np.inf
        order = np.lexsort((np.arange(kl), -svec))
        chosen = [int(t) for t in order[:z] if np.isfinite(svec[t])]
        _, log_pl, log_tr = log_tables(cooc)
        for t in chosen:
            graph.nodes.append({
                "layer": lower, "word": t, "score": float(svec[t]),
                "occurrences": _occurrences(low_assign, omega, t),
                "log_prior": float(log_pl[t]),
            })
        for s in selected:
            for t in chosen:
                lr = float(log_tr[s, t] - log_pl[t])
                edge = {
                    "upper_layer": upper, "upper_word": int(s),
                    "lower_layer": lower, "lower_word": t,
                    "frequency": int(q[t, s]),
                    "log_ratio": lr,
                    "score": float(q[t, s] * lr),
                    "drawn": lr > 0.0,
                    "significant": lr > 1.0,
                }
                if with_heatmaps:
                    cells, flagged = edge_heatmap(up_assign, low_assign, fm,
                                                  omega, s, t)
                    edge["heatmap"] = [[round(v, 12) for v in row]
                                       for row in cells.tolist()]
                    edge["heatmap_flagged"] = flagged
                graph.edges.append(edge)
        selected = chosen
    return graph
