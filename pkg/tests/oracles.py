"""Slow, loop-based reference implementations used as test oracles.

None of these call into the package except to read graph structure.
"""
import itertools
import math

import numpy as np

from infracascade.graph import LayerKind, RelationKind

from conftest import bfs_all_pairs


def mean_initial_distance(g, initial):
    dist = bfs_all_pairs(g)
    n = g.num_nodes
    total = 0
    for i in sorted(set(int(x) for x in initial)):
        for v in range(n):
            total += dist[i, v] if dist[i, v] >= 0 else n
    return total / n


def connectivity(g, removed=()):
    removed = set(int(x) for x in removed)
    parent = {v: v for v in range(g.num_nodes) if v not in removed}

    def find(x):
        while parent[x] != x:
            x = parent[x]
        return x

    for u, v in zip(g.src.tolist(), g.dst.tolist()):
        if u in parent and v in parent:
            a, b = find(u), find(v)
            if a != b:
                parent[a] = b
    sizes = {}
    for v in parent:
        r = find(v)
        sizes[r] = sizes.get(r, 0) + 1
    return sum(s * (s - 1) // 2 for s in sizes.values())


def anc(g, removed):
    return connectivity(g, removed) / connectivity(g)


def aoi_yield(g, failed):
    failed = set(int(x) for x in failed)
    suppliers = {}
    for u, v, r in zip(g.src.tolist(), g.dst.tolist(), g.rel.tolist()):
        if r == RelationKind.COM_AOI:
            aoi = u if g.layers[u] == LayerKind.AOI else v
            other = v if aoi == u else u
            suppliers.setdefault(aoi, []).append(other)
    aois = [v for v in range(g.num_nodes) if g.layers[v] == LayerKind.AOI]
    alive = 0
    for a in aois:
        s = suppliers[a]
        down = sum(1 for x in s if x in failed)
        if not down > len(s) / 2:
            alive += 1
    return alive / len(aois)


def prf1(predicted, truth):
    p, t = set(predicted), set(truth)
    tp = len(p & t)
    fp = len(p - t)
    fn = len(t - p)
    if tp + fp + fn == 0:
        return 1.0, 1.0, 1.0
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 1.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return prec, rec, f1


def auc(scores, labels):
    """Fraction of (positive, negative) pairs ordered correctly, ties counted half."""
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = 0.0
    for a, b in itertools.product(pos, neg):
        wins += 1.0 if a > b else 0.5 if a == b else 0.0
    return wins / (len(pos) * len(neg))


def rmse(pred, true):
    return math.sqrt(sum((a - b) ** 2 for a, b in zip(pred, true)) / len(pred))


ACT = {"identity": lambda x: x, "relu": lambda x: np.maximum(x, 0), "tanh": np.tanh}


def sym_norm(A):
    M = A + np.eye(A.shape[0])
    d = M.sum(axis=1)
    return M / np.sqrt(np.outer(d, d))


def diffpool(level, A, X):
    """Dense DiffPool step: returns (X', A', S)."""
    An = sym_norm(A)
    Z = An @ X @ level.embed.W.data + level.embed.b.data
    Z = ACT[level.embed.activation](Z)
    logits = An @ X @ level.pool.W.data + level.pool.b.data
    S = np.exp(logits - logits.max(axis=1, keepdims=True))
    S /= S.sum(axis=1, keepdims=True)
    return S.T @ Z, S.T @ A @ S, S


def rgcn(g, layer, H):
    """Per-node loop over relations and neighbours, mean-normalised per relation."""
    n = g.num_nodes
    out = H @ layer.W0.data
    if layer.b is not None:
        out = out + layer.b.data
    for r, W in layer.weights.items():
        nbrs = [[] for _ in range(n)]
        for u, v, rr in zip(g.src.tolist(), g.dst.tolist(), g.rel.tolist()):
            if rr == r:
                nbrs[u].append(v)
                nbrs[v].append(u)
        for i in range(n):
            for j in nbrs[i]:
                out[i] += (H[j] @ W.data) / len(nbrs[i])
    return ACT[layer.activation](out)
