"""Heterogeneous interdependent-infrastructure graph.

Nodes carry a layer (electric, road, communication, AOI) and a binary state.
Edges are undirected and typed by a relation that fixes which two layers
they connect.  Node ids are dense ``0..N-1`` across the whole coupled graph.
"""

from __future__ import annotations

import json
from enum import IntEnum
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse import csgraph


class GraphFormatError(ValueError):
    """Raised when a graph document cannot be parsed or fails validation."""


class LayerKind(IntEnum):
    ELECTRIC = 0
    ROAD = 1
    COM = 2
    AOI = 3

    @property
    def label(self) -> str:
        return _LAYER_LABELS[self]

    @classmethod
    def parse(cls, text: str) -> "LayerKind":
        try:
            return _LAYER_BY_LABEL[text]
        except KeyError:
            raise GraphFormatError(f"unknown layer {text!r}") from None


_LAYER_LABELS = {
    LayerKind.ELECTRIC: "electric",
    LayerKind.ROAD: "road",
    LayerKind.COM: "com",
    LayerKind.AOI: "aoi",
}
_LAYER_BY_LABEL = {v: k for k, v in _LAYER_LABELS.items()}


class RelationKind(IntEnum):
    ELEC_ELEC = 0
    ROAD_ROAD = 1
    COM_COM = 2
    ELEC_ROAD = 3
    ELEC_COM = 4
    ELEC_AOI = 5
    COM_AOI = 6

    @property
    def label(self) -> str:
        return _REL_LABELS[self]

    @property
    def endpoints(self) -> tuple[LayerKind, LayerKind]:
        return _REL_ENDPOINTS[self]

    @property
    def is_intra(self) -> bool:
        a, b = self.endpoints
        return a == b

    @classmethod
    def parse(cls, text: str) -> "RelationKind":
        try:
            return _REL_BY_LABEL[text]
        except KeyError:
            raise GraphFormatError(f"unknown relation {text!r}") from None


_REL_LABELS = {
    RelationKind.ELEC_ELEC: "elec-elec",
    RelationKind.ROAD_ROAD: "road-road",
    RelationKind.COM_COM: "com-com",
    RelationKind.ELEC_ROAD: "elec-road",
    RelationKind.ELEC_COM: "elec-com",
    RelationKind.ELEC_AOI: "elec-aoi",
    RelationKind.COM_AOI: "com-aoi",
}
_REL_BY_LABEL = {v: k for k, v in _REL_LABELS.items()}
_E, _R, _C, _A = LayerKind.ELECTRIC, LayerKind.ROAD, LayerKind.COM, LayerKind.AOI
_REL_ENDPOINTS = {
    RelationKind.ELEC_ELEC: (_E, _E),
    RelationKind.ROAD_ROAD: (_R, _R),
    RelationKind.COM_COM: (_C, _C),
    RelationKind.ELEC_ROAD: (_E, _R),
    RelationKind.ELEC_COM: (_E, _C),
    RelationKind.ELEC_AOI: (_E, _A),
    RelationKind.COM_AOI: (_C, _A),
}

# Relation linking each layer to itself; AOI intra-edges are not modelled by a relation.
INTRA_RELATION = {
    LayerKind.ELECTRIC: RelationKind.ELEC_ELEC,
    LayerKind.ROAD: RelationKind.ROAD_ROAD,
    LayerKind.COM: RelationKind.COM_COM,
}

UNREACHABLE = -1
FORMAT_VERSION = 1


def failed_set(ids: Iterable[int], num_nodes: int | None = None) -> np.ndarray:
    """Canonical failed-set: sorted, unique int64 ids, optionally range-checked."""
    arr = np.unique(np.asarray(list(ids) if not isinstance(ids, np.ndarray) else ids, dtype=np.int64))
    if num_nodes is not None and arr.size and (arr[0] < 0 or arr[-1] >= num_nodes):
        raise ValueError(f"failed set contains ids outside 0..{num_nodes - 1}")
    return arr


class HeteroGraph:
    """Immutable typed graph with per-relation symmetric CSR adjacency.

    Parameters
    ----------
    layers : sequence of LayerKind codes, one per node id.
    edges : sequence of ``(src, dst, RelationKind)``; orientation is normalised
        so that ``src`` lies in the relation's first layer (intra edges: src < dst).
    states : optional node states (1 = normal, 0 = failed); defaults to all 1.
    tiers : optional per-node tier annotation (0 = top tier); -1 where absent.
    """

    def __init__(self, layers, edges, states=None, tiers=None):
        layers = np.asarray(layers, dtype=np.int8)
        n = layers.size
        if n and (layers.min() < 0 or layers.max() > 3):
            raise GraphFormatError("layer codes must be in 0..3")
        states = np.ones(n, dtype=np.int8) if states is None else np.asarray(states, dtype=np.int8)
        if states.shape != (n,) or np.any((states != 0) & (states != 1)):
            raise GraphFormatError("node states must be 0 or 1, one per node")
        tiers = np.full(n, -1, dtype=np.int16) if tiers is None else np.asarray(tiers, dtype=np.int16)

        src, dst, rel = _normalise_edges(layers, edges)
        self.layers = layers
        self.states = states
        self.tiers = tiers
        self.src, self.dst, self.rel = src, dst, rel
        for arr in (self.layers, self.states, self.tiers, self.src, self.dst, self.rel):
            arr.setflags(write=False)

        self.layer_nodes = {k: np.flatnonzero(layers == k) for k in LayerKind}
        self._rel_adj: dict[RelationKind, sp.csr_matrix] = {}
        for r in RelationKind:
            m = rel == r
            self._rel_adj[r] = _sym_csr(src[m], dst[m], n)
        self._adj = _sym_csr(src, dst, n)

    @property
    def num_nodes(self) -> int:
        return int(self.layers.size)

    @property
    def num_edges(self) -> int:
        return int(self.src.size)

    def adjacency(self, relations: Iterable[RelationKind] | None = None) -> sp.csr_matrix:
        """Symmetric 0/1 adjacency over the union of ``relations`` (default: all)."""
        if relations is None:
            return self._adj
        rels = list(relations)
        if len(rels) == 1:
            return self._rel_adj[RelationKind(rels[0])]
        acc = sum((self._rel_adj[RelationKind(r)] for r in rels), sp.csr_matrix((self.num_nodes,) * 2))
        acc = acc.tocsr()
        acc.data[:] = 1.0
        return acc

    def relation_adjacency(self, rel: RelationKind) -> sp.csr_matrix:
        return self._rel_adj[RelationKind(rel)]

    def relations_present(self) -> list[RelationKind]:
        return [r for r in RelationKind if self._rel_adj[r].nnz]

    def neighbors(self, node: int, rel: RelationKind | None = None) -> np.ndarray:
        a = self._adj if rel is None else self._rel_adj[RelationKind(rel)]
        return a.indices[a.indptr[node]:a.indptr[node + 1]]

    def edge_count(self, rel: RelationKind) -> int:
        return int(np.count_nonzero(self.rel == rel))

    def subgraph(self, nodes: Sequence[int]) -> tuple["HeteroGraph", np.ndarray]:
        """Induced subgraph on ``nodes``, relabelled densely in sorted order.

        Returns the subgraph and the array mapping new ids to original ids.
        """
        keep = failed_set(nodes, self.num_nodes)
        remap = np.full(self.num_nodes, -1, dtype=np.int64)
        remap[keep] = np.arange(keep.size)
        m = (remap[self.src] >= 0) & (remap[self.dst] >= 0)
        edges = zip(remap[self.src[m]].tolist(), remap[self.dst[m]].tolist(), self.rel[m].tolist())
        sub = HeteroGraph(self.layers[keep], list(edges), self.states[keep], self.tiers[keep])
        return sub, keep

    def layer_subgraph(self, layer: LayerKind) -> tuple["HeteroGraph", np.ndarray]:
        return self.subgraph(self.layer_nodes[LayerKind(layer)])

    def __repr__(self) -> str:
        counts = ", ".join(f"{k.label}={v.size}" for k, v in self.layer_nodes.items())
        return f"HeteroGraph(N={self.num_nodes}, E={self.num_edges}, {counts})"


def _normalise_edges(layers: np.ndarray, edges) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = layers.size
    if isinstance(edges, tuple) and len(edges) == 3 and isinstance(edges[0], np.ndarray):
        src, dst, rel = (np.asarray(a, dtype=np.int64) for a in edges)
    else:
        trip = list(edges)
        if trip:
            arr = np.asarray([(int(s), int(d), int(r)) for s, d, r in trip], dtype=np.int64)
            src, dst, rel = arr[:, 0].copy(), arr[:, 1].copy(), arr[:, 2].copy()
        else:
            src = dst = rel = np.zeros(0, dtype=np.int64)
    if src.size:
        if src.min() < 0 or dst.min() < 0 or src.max() >= n or dst.max() >= n:
            bad = np.flatnonzero((src < 0) | (dst < 0) | (src >= n) | (dst >= n))[0]
            raise GraphFormatError(f"edge {int(src[bad])}-{int(dst[bad])} has endpoint outside 0..{n - 1}")
        if rel.min() < 0 or rel.max() > 6:
            raise GraphFormatError("relation codes must be in 0..6")
        loops = np.flatnonzero(src == dst)
        if loops.size:
            raise GraphFormatError(f"self-loop on node {int(src[loops[0]])} is not allowed")
    ends = np.array([[a, b] for a, b in (RelationKind(r).endpoints for r in range(7))], dtype=np.int64)
    ls, ld = layers[src].astype(np.int64), layers[dst].astype(np.int64)
    want_a, want_b = ends[rel, 0], ends[rel, 1]
    forward = (ls == want_a) & (ld == want_b)
    backward = (ls == want_b) & (ld == want_a)
    bad = np.flatnonzero(~(forward | backward))
    if bad.size:
        i = bad[0]
        r = RelationKind(int(rel[i]))
        raise GraphFormatError(
            f"edge {int(src[i])}-{int(dst[i])} labelled {r.label} joins "
            f"{LayerKind(int(ls[i])).label} and {LayerKind(int(ld[i])).label}"
        )
    intra = want_a == want_b
    swap = (backward & ~forward) | (intra & (src > dst))
    src, dst = np.where(swap, dst, src), np.where(swap, src, dst)
    order = np.lexsort((dst, src, rel))
    src, dst, rel = src[order], dst[order], rel[order]
    if src.size > 1:
        dup = np.flatnonzero((src[1:] == src[:-1]) & (dst[1:] == dst[:-1]) & (rel[1:] == rel[:-1]))
        if dup.size:
            i = dup[0]
            raise GraphFormatError(
                f"duplicate edge {int(src[i])}-{int(dst[i])} ({RelationKind(int(rel[i])).label})"
            )
    return src, dst, rel.astype(np.int8)


def _sym_csr(src: np.ndarray, dst: np.ndarray, n: int) -> sp.csr_matrix:
    rows = np.concatenate([src, dst])
    cols = np.concatenate([dst, src])
    a = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))
    a.sum_duplicates()
    a.data[:] = 1.0  # parallel edges of different relations collapse in the union view
    a.sort_indices()
    return a


# --------------------------------------------------------------------------- I/O


def load_graph(document: bytes | str) -> HeteroGraph:
    """Parse a graph document (UTF-8 JSON) into a validated :class:`HeteroGraph`."""
    if isinstance(document, bytes):
        try:
            document = document.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise GraphFormatError(f"graph document is not UTF-8: {exc}") from None
    try:
        doc = json.loads(document)
    except json.JSONDecodeError as exc:
        raise GraphFormatError(f"malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise GraphFormatError("top level must be an object")
    if doc.get("version") != FORMAT_VERSION:
        raise GraphFormatError(f"field 'version': expected {FORMAT_VERSION}, got {doc.get('version')!r}")
    nodes = doc.get("nodes")
    edges = doc.get("edges")
    if not isinstance(nodes, list):
        raise GraphFormatError("field 'nodes' must be a list")
    if not isinstance(edges, list):
        raise GraphFormatError("field 'edges' must be a list")

    n = len(nodes)
    layers = np.empty(n, dtype=np.int8)
    states = np.empty(n, dtype=np.int8)
    tiers = np.full(n, -1, dtype=np.int16)
    seen = np.zeros(n, dtype=bool)
    for k, rec in enumerate(nodes):
        where = f"nodes[{k}]"
        if not isinstance(rec, dict):
            raise GraphFormatError(f"{where} must be an object")
        nid = _int_field(rec, "id", where)
        if not 0 <= nid < n or seen[nid]:
            raise GraphFormatError(f"{where}.id={nid}: ids must be unique and contiguous 0..{n - 1}")
        seen[nid] = True
        layer = rec.get("layer")
        if not isinstance(layer, str):
            raise GraphFormatError(f"{where}.layer must be a string")
        try:
            layers[nid] = LayerKind.parse(layer)
        except GraphFormatError as exc:
            raise GraphFormatError(f"{where}.layer: {exc}") from None
        state = rec.get("state", 1)
        if state not in (0, 1) or isinstance(state, bool):
            raise GraphFormatError(f"{where}.state must be 0 or 1")
        states[nid] = state
        if "tier" in rec:
            tiers[nid] = _int_field(rec, "tier", where)

    trip = []
    for k, rec in enumerate(edges):
        where = f"edges[{k}]"
        if not isinstance(rec, dict):
            raise GraphFormatError(f"{where} must be an object")
        s = _int_field(rec, "src", where)
        d = _int_field(rec, "dst", where)
        r = rec.get("rel")
        if not isinstance(r, str):
            raise GraphFormatError(f"{where}.rel must be a string")
        try:
            trip.append((s, d, RelationKind.parse(r)))
        except GraphFormatError as exc:
            raise GraphFormatError(f"{where}.rel: {exc}") from None
    try:
        return HeteroGraph(layers, trip, states, tiers)
    except GraphFormatError as exc:
        raise GraphFormatError(f"validation failed: {exc}") from None


def _int_field(rec: dict, key: str, where: str) -> int:
    v = rec.get(key)
    if not isinstance(v, int) or isinstance(v, bool):
        raise GraphFormatError(f"{where}.{key} must be an integer")
    return v


def dump_graph(g: HeteroGraph, meta: dict | None = None) -> bytes:
    """Canonical document: nodes by id, edges by (relation code, src, dst).

    ``meta`` is written as an extra top-level field that loading ignores.
    """
    nodes = []
    for i in range(g.num_nodes):
        rec = {"id": i, "layer": LayerKind(int(g.layers[i])).label, "state": int(g.states[i])}
        if g.tiers[i] >= 0:
            rec["tier"] = int(g.tiers[i])
        nodes.append(rec)
    edges = [
        {"src": int(s), "dst": int(d), "rel": RelationKind(int(r)).label}
        for s, d, r in zip(g.src, g.dst, g.rel)
    ]
    head = '{"version":%d,' % FORMAT_VERSION
    if meta is not None:
        head += '"meta":%s,' % json.dumps(meta, sort_keys=True, separators=(",", ":"))
    lines = [head + '"nodes":[']
    lines.append(",\n".join(json.dumps(x, separators=(",", ":")) for x in nodes))
    lines.append('],"edges":[')
    lines.append(",\n".join(json.dumps(x, separators=(",", ":")) for x in edges))
    lines.append("]}\n")
    return "\n".join(lines).encode("utf-8")


# ------------------------------------------------------------------ algorithms


def multi_source_distance(g: HeteroGraph, sources: Iterable[int]) -> np.ndarray:
    """Hop distance from the nearest source over the union of all relations.

    Unreachable nodes carry ``UNREACHABLE`` (-1).
    """
    src = failed_set(sources, g.num_nodes)
    if src.size == 0:
        raise ValueError("multi_source_distance needs at least one source")
    return _frontier_bfs(g.adjacency(), src)


def _frontier_bfs(adj: sp.csr_matrix, src: np.ndarray) -> np.ndarray:
    n = adj.shape[0]
    dist = np.full(n, UNREACHABLE, dtype=np.int64)
    dist[src] = 0
    frontier = np.zeros(n, dtype=np.float64)
    frontier[src] = 1.0
    level = 0
    while True:
        reached = (adj @ frontier) > 0
        new = reached & (dist == UNREACHABLE)
        if not new.any():
            return dist
        level += 1
        dist[new] = level
        frontier = new.astype(np.float64)


def capped_distance(g: HeteroGraph, sources: Iterable[int]) -> np.ndarray:
    """Distance to the source set with unreachable nodes capped at N."""
    d = multi_source_distance(g, sources)
    d[d == UNREACHABLE] = g.num_nodes
    return d


def mean_initial_distance(g: HeteroGraph, initial: Iterable[int]) -> float:
    """Sum over initial failed nodes of their distance sums to all nodes, over |V|.

    Unreachable pairs contribute N.
    """
    d = failed_set(initial, g.num_nodes)
    if d.size == 0:
        raise ValueError("mean_initial_distance needs a non-empty initial failed set")
    return float(per_source_distance_sums(g, d).sum()) / g.num_nodes


def per_source_distance_sums(g: HeteroGraph, sources: np.ndarray, members: np.ndarray | None = None) -> np.ndarray:
    """For each source i, the capped distance sum over ``members`` (default all nodes)."""
    dist = csgraph.shortest_path(g.adjacency(), unweighted=True, directed=False, indices=sources)
    dist = np.atleast_2d(dist)
    dist[np.isinf(dist)] = g.num_nodes
    if members is not None:
        dist = dist[:, members]
    return dist.sum(axis=1)


def source_distance_matrix(g: HeteroGraph, sources: np.ndarray) -> np.ndarray:
    """Capped hop distances, shape ``(len(sources), N)``."""
    dist = csgraph.shortest_path(g.adjacency(), unweighted=True, directed=False, indices=sources)
    dist = np.atleast_2d(dist)
    dist[np.isinf(dist)] = g.num_nodes
    return dist


def components(g: HeteroGraph, removed: Iterable[int] = ()) -> list[list[int]]:
    """Connected components of the graph after deleting ``removed``.

    Components are sorted lists, ordered by their smallest member.
    """
    gone = failed_set(removed, g.num_nodes)
    alive = np.ones(g.num_nodes, dtype=bool)
    alive[gone] = False
    keep = np.flatnonzero(alive)
    if keep.size == 0:
        return []
    sub = g.adjacency()[keep][:, keep]
    _, labels = csgraph.connected_components(sub, directed=False)
    groups: dict[int, list[int]] = {}
    for node, lab in zip(keep.tolist(), labels.tolist()):
        groups.setdefault(lab, []).append(node)
    return sorted(groups.values(), key=lambda c: c[0])


def connectivity(g: HeteroGraph, removed: Iterable[int] = ()) -> int:
    """Pairwise connectivity: sum over components of size*(size-1)/2."""
    return sum(len(c) * (len(c) - 1) // 2 for c in components(g, removed))
