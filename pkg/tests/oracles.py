"""Slow, obviously-correct reference implementations used as test oracles."""

import itertools
import math
from functools import lru_cache

import numpy as np


def rope_reference(x: np.ndarray, base: float = 10000.0) -> np.ndarray:
    """Rotate each interleaved pair (2j, 2j+1) at position p by p * base^(-2j/d)."""
    n, d = x.shape
    out = np.empty_like(x)
    for p in range(n):
        for j in range(d // 2):
            ang = p * base ** (-2.0 * j / d)
            c, s = math.cos(ang), math.sin(ang)
            a, b = x[p, 2 * j], x[p, 2 * j + 1]
            out[p, 2 * j] = a * c - b * s
            out[p, 2 * j + 1] = a * s + b * c
    return out


def dense_mha_reference(x, wq, wk, wv, wo, heads: int, base: float = 10000.0,
                        windows=None) -> np.ndarray:
    """Multi-head attention for one sequence x (N, H), explicit per-row softmax.

    ``windows`` (per-head radii) restricts row i of head h to |i-j| <= L_h;
    None means full attention.
    """
    n, hdim = x.shape
    d = hdim // heads
    q, k, v = x @ wq, x @ wk, x @ wv
    ctx = np.zeros((n, hdim))
    for h in range(heads):
        sl = slice(h * d, (h + 1) * d)
        qh, kh = rope_reference(q[:, sl], base), rope_reference(k[:, sl], base)
        for i in range(n):
            keys = [j for j in range(n) if windows is None or abs(i - j) <= windows[h]]
            s = np.array([qh[i] @ kh[j] / math.sqrt(d) for j in keys])
            w = np.exp(s - s.max())
            w /= w.sum()
            ctx[i, sl] = sum(wj * v[j, sl] for wj, j in zip(w, keys))
    return ctx @ wo


def run_scanner(labels, min_len: int):
    """(start, end, label) for maximal runs of a nonzero label, scanned one token at a time."""
    out = []
    i, n = 0, len(labels)
    while i < n:
        j = i
        while j + 1 < n and labels[j + 1] == labels[i]:
            j += 1
        if labels[i] != 0 and j + 1 - i >= min_len:
            out.append((i, j + 1, int(labels[i])))
        i = j + 1
    return out


def exhaustive_match_count(truth, pred, ok) -> int:
    """Maximum number of disjoint (truth, pred) pairs with ok(t, p), by DP over pred subsets."""
    pred = list(pred)
    m = len(pred)
    edges = [[j for j in range(m) if ok(t, pred[j])] for t in truth]

    @lru_cache(maxsize=None)
    def best(i: int, used: int) -> int:
        if i == len(truth):
            return 0
        val = best(i + 1, used)
        for j in edges[i]:
            if not used >> j & 1:
                val = max(val, 1 + best(i + 1, used | 1 << j))
        return val

    return best(0, 0)


def best_segmentation_score(logp: np.ndarray, switch_cost: float) -> float:
    """Max over every label path of sum log p minus switch_cost per change, by enumeration."""
    n, k = logp.shape
    best = -np.inf
    for path in itertools.product(range(k), repeat=n):
        s = sum(logp[t, c] for t, c in enumerate(path))
        s -= switch_cost * sum(a != b for a, b in zip(path, path[1:]))
        best = max(best, s)
    return best
