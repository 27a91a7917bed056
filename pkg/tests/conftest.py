import itertools

import numpy as np
import pytest

from infracascade.graph import HeteroGraph, LayerKind, RelationKind

E, R, C, A = LayerKind.ELECTRIC, LayerKind.ROAD, LayerKind.COM, LayerKind.AOI


def path_graph(n, layer=LayerKind.ELECTRIC):
    rel = {E: RelationKind.ELEC_ELEC, R: RelationKind.ROAD_ROAD, C: RelationKind.COM_COM}[layer]
    return HeteroGraph([layer] * n, [(i, i + 1, rel) for i in range(n - 1)])


def random_hetero(rng, n, p=0.15):
    """Random graph over all four layers with every allowed relation possible."""
    layers = rng.integers(0, 4, size=n)
    layers[:4] = [0, 1, 2, 3]
    allowed = {(a, b): r for r in RelationKind for a, b in [r.endpoints, r.endpoints[::-1]]}
    edges = []
    for i, j in itertools.combinations(range(n), 2):
        r = allowed.get((LayerKind(layers[i]), LayerKind(layers[j])))
        if r is not None and rng.random() < p:
            edges.append((i, j, r))
    return HeteroGraph(layers, edges)


def random_single(rng, n, p=0.2, layer=LayerKind.ROAD):
    rel = {E: RelationKind.ELEC_ELEC, R: RelationKind.ROAD_ROAD, C: RelationKind.COM_COM}[layer]
    edges = [(i, j, rel) for i, j in itertools.combinations(range(n), 2) if rng.random() < p]
    return HeteroGraph([layer] * n, edges)


def bfs_all_pairs(g):
    """Plain-Python breadth-first distances, -1 where unreachable."""
    n = g.num_nodes
    nbr = [[] for _ in range(n)]
    for s, d in zip(g.src.tolist(), g.dst.tolist()):
        nbr[s].append(d)
        nbr[d].append(s)
    out = np.full((n, n), -1, dtype=np.int64)
    for s in range(n):
        out[s, s] = 0
        queue = [s]
        while queue:
            nxt = []
            for u in queue:
                for v in nbr[u]:
                    if out[s, v] < 0:
                        out[s, v] = out[s, u] + 1
                        nxt.append(v)
            queue = nxt
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one "[criterion k] PASS/FAIL ..." line per acceptance criterion, repeated in the summary
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
