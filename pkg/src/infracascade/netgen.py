"""Deterministic synthetic interdependent-infrastructure networks.

Every layer is embedded in the unit square.  Intra-layer topologies:

* electric -- tiered tree (top-tier generators, mid-tier substations,
  distribution nodes) plus random long-range lines that lift every node to
  a common degree;
* road -- degree-bounded k-nearest-neighbour geometric graph;
* communication -- preferential attachment.

Coupling edges are drawn by nearest-available-supplier matching so that
dependencies stay spatially local.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.spatial import cKDTree
from scipy.sparse import csgraph
import scipy.sparse as sp

from .graph import HeteroGraph, LayerKind, RelationKind

# Homogeneous and coupling counts of the full-size synthetic city.
REFERENCE_NODE_COUNTS = {"n_elec": 10_227, "n_road": 4_825, "n_com": 20_229}
REFERENCE_INTRA_EDGES = {
    RelationKind.ELEC_ELEC: 7_799,
    RelationKind.ROAD_ROAD: 20_352,
    RelationKind.COM_COM: 44_282,
}
REFERENCE_COUPLING_EDGES = {
    RelationKind.ELEC_ROAD: 7_799,
    RelationKind.ELEC_COM: 20_352,
    RelationKind.ELEC_AOI: 21_569,
    RelationKind.COM_AOI: 37_279,
}
# No AOI count is published; this full-scale value keeps both AOI densities above one.
REFERENCE_AOI_COUNT = 10_000

COUPLING_TARGET = {
    RelationKind.ELEC_ROAD: ("n_road", LayerKind.ROAD),
    RelationKind.ELEC_COM: ("n_com", LayerKind.COM),
    RelationKind.ELEC_AOI: ("n_aoi", LayerKind.AOI),
    RelationKind.COM_AOI: ("n_aoi", LayerKind.AOI),
}
COUPLING_SUPPLIER = {
    RelationKind.ELEC_ROAD: LayerKind.ELECTRIC,
    RelationKind.ELEC_COM: LayerKind.ELECTRIC,
    RelationKind.ELEC_AOI: LayerKind.ELECTRIC,
    RelationKind.COM_AOI: LayerKind.COM,
}
# Every AOI must get at least one power and one signal supplier.
MANDATORY_SUPPLY = (RelationKind.ELEC_AOI, RelationKind.COM_AOI)


class ConfigError(ValueError):
    pass


def _default_density() -> dict[str, float]:
    return {"elec-road": 1.6, "elec-com": 1.0, "elec-aoi": 2.0, "com-aoi": 3.0}


@dataclass(frozen=True)
class GenConfig:
    n_elec: int
    n_road: int
    n_com: int
    n_aoi: int
    seed: int = 0
    # electric: fraction of nodes in the top (500kV-like) and mid (220kV-like) tiers
    tier_fractions: tuple[float, float] = (0.03, 0.2)
    elec_degree: int = 8  # random long-range lines top every electric node up to this degree
    road_k: int = 3
    road_max_degree: int = 6
    com_m: int = 2
    com_core_fraction: float = 0.02
    density: dict[str, float] = field(default_factory=_default_density)

    def validate(self) -> None:
        for name in ("n_elec", "n_road", "n_com", "n_aoi"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        top, mid = self.tier_fractions
        if not (0 <= top <= 1 and 0 <= mid <= 1 and top + mid <= 1):
            raise ConfigError("tier_fractions must be in [0,1] and sum to at most 1")
        if self.road_k < 1 or self.road_max_degree < 1 or self.com_m < 1:
            raise ConfigError("road_k, road_max_degree and com_m must be >= 1")
        if self.elec_degree < 0:
            raise ConfigError("elec_degree must be >= 0")
        for label in self.density:
            RelationKind.parse(label)
        for rel in COUPLING_TARGET:
            d = self.density.get(rel.label, 0.0)
            if d < 0:
                raise ConfigError(f"density[{rel.label}] must be >= 0")
        for rel in MANDATORY_SUPPLY:
            if self.density.get(rel.label, 0.0) < 1.0:
                raise ConfigError(
                    f"density[{rel.label}]={self.density.get(rel.label, 0.0)} cannot give every AOI a supplier (need >= 1)"
                )

    def expected_coupling_edges(self) -> dict[RelationKind, int]:
        return {
            rel: int(round(self.density.get(rel.label, 0.0) * getattr(self, attr)))
            for rel, (attr, _) in COUPLING_TARGET.items()
        }

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tier_fractions"] = list(self.tier_fractions)
        d["density"] = dict(sorted(self.density.items()))
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        d = dict(d)
        if "tier_fractions" in d:
            d["tier_fractions"] = tuple(d["tier_fractions"])
        if "density" in d:
            merged = _default_density()
            merged.update({k: float(v) for k, v in d["density"].items()})
            d["density"] = merged
        return cls(**d)


def reference_preset(scale: float, seed: int = 0) -> GenConfig:
    """Config whose node counts and coupling-edge targets are the full-size city times ``scale``."""
    if not 0 < scale <= 1:
        raise ConfigError("scale must be in (0, 1]")
    counts = {k: max(1, round(v * scale)) for k, v in REFERENCE_NODE_COUNTS.items()}
    counts["n_aoi"] = max(1, round(REFERENCE_AOI_COUNT * scale))
    density = {}
    for rel, (attr, _) in COUPLING_TARGET.items():
        target = max(1, round(REFERENCE_COUPLING_EDGES[rel] * scale))
        density[rel.label] = target / counts[attr]
    # k-NN and attachment both add about k (resp. m) edges per node
    road_k = max(1, round(REFERENCE_INTRA_EDGES[RelationKind.ROAD_ROAD] / REFERENCE_NODE_COUNTS["n_road"]))
    com_m = max(1, round(REFERENCE_INTRA_EDGES[RelationKind.COM_COM] / REFERENCE_NODE_COUNTS["n_com"]))
    return GenConfig(seed=seed, road_k=road_k, road_max_degree=2 * road_k + 2, com_m=com_m, density=density, **counts)


def generate(cfg: GenConfig) -> HeteroGraph:
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x6E6574]))
    sizes = [cfg.n_elec, cfg.n_road, cfg.n_com, cfg.n_aoi]
    offsets = np.cumsum([0] + sizes)
    n = int(offsets[-1])
    layers = np.repeat(np.arange(4, dtype=np.int8), sizes)
    pos = rng.random((n, 2))
    tiers = np.full(n, -1, dtype=np.int16)
    edges: list[tuple[int, int, int]] = []

    def gid(layer: LayerKind, local):
        return np.asarray(local) + offsets[int(layer)]

    e_pos = pos[offsets[0]:offsets[1]]
    e_edges, e_tier = _electric_tree(e_pos, cfg, rng)
    tiers[offsets[0]:offsets[1]] = e_tier
    edges += [(int(gid(_E, a)), int(gid(_E, b)), RelationKind.ELEC_ELEC) for a, b in e_edges]

    r_edges = _road_lattice(pos[offsets[1]:offsets[2]], cfg.road_k, cfg.road_max_degree)
    edges += [(int(gid(_R, a)), int(gid(_R, b)), RelationKind.ROAD_ROAD) for a, b in r_edges]

    c_edges, c_core = _preferential_attachment(cfg.n_com, cfg.com_m, cfg.com_core_fraction, rng)
    tiers[offsets[2]:offsets[3]] = np.where(c_core, 0, 1)
    edges += [(int(gid(_C, a)), int(gid(_C, b)), RelationKind.COM_COM) for a, b in c_edges]

    for rel, (attr, target_layer) in COUPLING_TARGET.items():
        density = cfg.density.get(rel.label, 0.0)
        sup_layer = COUPLING_SUPPLIER[rel]
        s0, s1 = offsets[int(sup_layer)], offsets[int(sup_layer) + 1]
        t0, t1 = offsets[int(target_layer)], offsets[int(target_layer) + 1]
        pairs = _nearest_supplier_matching(
            pos[s0:s1], pos[t0:t1], density, rel in MANDATORY_SUPPLY, rng
        )
        edges += [(int(s0 + a), int(t0 + b), rel) for a, b in pairs]

    return HeteroGraph(layers, edges, tiers=tiers)


_E, _R, _C = LayerKind.ELECTRIC, LayerKind.ROAD, LayerKind.COM


def _electric_tree(pos: np.ndarray, cfg: GenConfig, rng: np.random.Generator):
    n = len(pos)
    top_frac, mid_frac = cfg.tier_fractions
    n_top = min(n, max(1, round(top_frac * n)))
    n_mid = min(n - n_top, round(mid_frac * n))
    perm = rng.permutation(n)
    tier = np.full(n, 2, dtype=np.int16)
    tier[perm[:n_top]] = 0
    tier[perm[n_top:n_top + n_mid]] = 1
    edges: set[tuple[int, int]] = set()

    top = np.sort(perm[:n_top])
    if top.size > 1:
        # backbone: minimum spanning tree over generator positions
        d = np.linalg.norm(pos[top][:, None] - pos[top][None], axis=-1)
        mst = csgraph.minimum_spanning_tree(sp.csr_matrix(d + 1e-12 * (d == 0)))
        for a, b in zip(*mst.nonzero()):
            edges.add(_ordered(int(top[a]), int(top[b])))

    # each lower-tier node hangs off its nearest node one tier up (or the nearest higher tier)
    for t in (1, 2):
        members = np.sort(np.flatnonzero(tier == t))
        parents = np.flatnonzero(tier < t)
        if members.size == 0:
            continue
        tree = cKDTree(pos[parents])
        _, idx = tree.query(pos[members], k=1)
        for m, p in zip(members, np.atleast_1d(idx)):
            edges.add(_ordered(int(m), int(parents[p])))

    # long-range lines pair up free stubs at random until every node reaches the target degree
    deg = np.zeros(n, dtype=int)
    for a, b in edges:
        deg[a] += 1
        deg[b] += 1
    stubs = np.repeat(np.arange(n), np.maximum(cfg.elec_degree - deg, 0))
    stubs = stubs[rng.permutation(stubs.size)]
    for a, b in zip(stubs[0::2], stubs[1::2]):
        e = _ordered(int(a), int(b))
        if a != b and e not in edges:
            edges.add(e)
    return sorted(edges), tier


def _road_lattice(pos: np.ndarray, k: int, max_degree: int):
    n = len(pos)
    if n < 2:
        return []
    tree = cKDTree(pos)
    kk = min(n, k + 1)
    dist, nbr = tree.query(pos, k=kk)
    cand = []
    for i in range(n):
        for d, j in zip(np.atleast_1d(dist[i])[1:], np.atleast_1d(nbr[i])[1:]):
            cand.append((float(d), *_ordered(i, int(j))))
    cand = sorted(set(cand))
    deg = np.zeros(n, dtype=int)
    edges: set[tuple[int, int]] = set()
    for _, a, b in cand:
        if (a, b) in edges or deg[a] >= max_degree or deg[b] >= max_degree:
            continue
        edges.add((a, b))
        deg[a] += 1
        deg[b] += 1
    # stitch components together through their closest node pairs
    while True:
        adj = _adj_from_edges(edges, n)
        ncomp, lab = csgraph.connected_components(adj, directed=False)
        if ncomp == 1:
            break
        main = np.flatnonzero(lab == lab[0])
        other = np.flatnonzero(lab != lab[0])
        d, idx = cKDTree(pos[main]).query(pos[other], k=1)
        best = int(np.argmin(d))
        edges.add(_ordered(int(other[best]), int(main[idx[best]])))
    return sorted(edges)


def _preferential_attachment(n: int, m: int, core_fraction: float, rng: np.random.Generator):
    edges: set[tuple[int, int]] = set()
    seed_size = min(n, m + 1)
    for i in range(seed_size):
        for j in range(i + 1, seed_size):
            edges.add((i, j))
    targets: list[int] = [v for e in sorted(edges) for v in e] or [0]
    for v in range(seed_size, n):
        chosen: set[int] = set()
        while len(chosen) < min(m, v):
            chosen.add(int(targets[rng.integers(len(targets))]))
        for u in sorted(chosen):
            edges.add((u, v))
            targets += [u, v]
    deg = np.zeros(n, dtype=int)
    for a, b in edges:
        deg[a] += 1
        deg[b] += 1
    n_core = min(n, max(1, round(core_fraction * n)))
    order = np.lexsort((np.arange(n), -deg))
    core = np.zeros(n, dtype=bool)
    core[order[:n_core]] = True
    return sorted(edges), core


def _nearest_supplier_matching(sup_pos, tgt_pos, density, mandatory, rng):
    n_sup, n_tgt = len(sup_pos), len(tgt_pos)
    if density <= 0 or n_sup == 0:
        return []
    base = math.floor(density)
    frac = density - base
    counts = base + (rng.random(n_tgt) < frac).astype(int)
    if mandatory:
        counts = np.maximum(counts, 1)
    counts = np.minimum(counts, n_sup)
    capacity = max(1, math.ceil(1.5 * counts.sum() / n_sup))
    load = np.zeros(n_sup, dtype=int)
    tree = cKDTree(sup_pos)
    pairs = []
    for t in rng.permutation(n_tgt):
        need = int(counts[t])
        if need == 0:
            continue
        k = min(n_sup, max(need * 4, 8))
        _, idx = tree.query(tgt_pos[t], k=k)
        ranked = [int(i) for i in np.atleast_1d(idx)]
        picked = [s for s in ranked if load[s] < capacity][:need]
        if len(picked) < need:
            rest = [s for s in ranked if s not in picked]
            picked += rest[: need - len(picked)]
        for s in picked:
            load[s] += 1
            pairs.append((s, int(t)))
    return sorted(pairs)


def _ordered(a: int, b: int) -> tuple[int, int]:
    return (a, b) if a < b else (b, a)


def _adj_from_edges(edges, n):
    if not edges:
        return sp.csr_matrix((n, n))
    arr = np.asarray(sorted(edges))
    return sp.csr_matrix((np.ones(len(arr)), (arr[:, 0], arr[:, 1])), shape=(n, n))
