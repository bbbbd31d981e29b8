import itertools

import numpy as np
import pytest

from actatlas.rect_hmm import rg_log_emission


def brute_force_chain(model, xs):
    """Exhaustive path enumeration: (log-likelihood, best path, best log joint)."""
    ks = model.k_per_layer
    best_path, best_lp = None, -np.inf
    lps = []
    for path in itertools.product(*[range(k) for k in ks]):
        lp = model.log_t1[path[0]]
        for l in range(1, len(ks)):
            lp += model.log_trans[l - 1][path[l], path[l - 1]]
        for l, h in enumerate(path):
            lp += float(np.sum(rg_log_emission(
                model.mus[l][h], model.sigmas[l][h], xs[l])))
        lps.append(lp)
        if lp > best_lp:
            best_lp, best_path = lp, path
    from scipy.special import logsumexp
    return float(logsumexp(lps)), best_path, float(best_lp)


def trace_receptive_field(stages, lower_shape, p):
    """Dependency-tracing oracle: which lower positions influence upper p.

    Propagates index sets through the stage chain; padding cells carry
    empty sets.
    """
    h, w = lower_shape
    grid = [[{(i, j)} for j in range(w)] for i in range(h)]
    for st in stages:
        (kh, kw), (sh, sw), (ph, pw) = st.kernel, st.stride, st.padding
        ch, cw = len(grid), len(grid[0])
        padded = [[set() for _ in range(cw + 2 * pw)] for _ in range(ch + 2 * ph)]
        for i in range(ch):
            for j in range(cw):
                padded[i + ph][j + pw] = grid[i][j]
        oh = (ch + 2 * ph - kh) // sh + 1
        ow = (cw + 2 * pw - kw) // sw + 1
        out = [[set() for _ in range(ow)] for _ in range(oh)]
        for i in range(oh):
            for j in range(ow):
                for di in range(kh):
                    for dj in range(kw):
                        out[i][j] |= padded[i * sh + di][j * sw + dj]
        grid = out
    return grid[p[0]][p[1]]


def hungarian_match(est, truth):
    """Permutation mapping estimated components onto true components."""
    from scipy.optimize import linear_sum_assignment
    cost = np.linalg.norm(est[:, None, :] - truth[None, :, :], axis=2)
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(len(rows), dtype=int)
    perm[cols] = rows
    return perm  # est[perm[j]] corresponds to truth[j]
