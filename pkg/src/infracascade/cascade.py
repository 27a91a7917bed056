"""Ground-truth cascade dynamics, the independent-cascade baseline and dataset builders.

The ground-truth oracle iterates synchronous rounds of three monotone rules
until nothing changes:

* intra-threshold -- a node whose failed fraction of same-layer neighbours
  exceeds ``intra_threshold`` fails;
* supplier rule -- an AOI fails when all of its electric suppliers failed or
  when more than half of its base stations failed;
* mutual percolation -- an electric (com) node must stay connected, through
  surviving same-layer nodes, to a surviving top-tier source (core router);
  com and road nodes need one surviving electric supplier, and electric
  nodes need one surviving coupled base station.

Every rule only ever adds failures when the failed set grows, so the final
set is monotone in the initial set and the oracle is idempotent.
"""

from __future__ import annotations

import io
import json
import weakref
import zlib
from dataclasses import dataclass, asdict
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse import csgraph

from .graph import HeteroGraph, LayerKind, RelationKind, failed_set
from .netgen import ConfigError


class CascadeError(RuntimeError):
    """The oracle hit ``max_rounds`` before reaching a fixed point."""

    def __init__(self, message: str, partial: np.ndarray, rounds: int):
        super().__init__(message)
        self.partial = partial
        self.rounds = rounds


@dataclass(frozen=True)
class CascadeParams:
    intra_threshold: float = 0.25
    supplier_rule: bool = True
    mutual_percolation: bool = True
    max_rounds: int = 10_000

    def __post_init__(self):
        if not 0.0 <= self.intra_threshold <= 1.0:
            raise ValueError("intra_threshold must be in [0, 1]")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class CascadeRecord:
    case_id: int
    initial_failed: tuple[int, ...]
    final_failed: tuple[int, ...]
    seed: int = 0
    model_tag: str = "dependency"

    def to_json(self) -> str:
        return json.dumps(
            {
                "case_id": self.case_id,
                "seed": self.seed,
                "model": self.model_tag,
                "initial_failed": list(self.initial_failed),
                "final_failed": list(self.final_failed),
            },
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, line: str) -> "CascadeRecord":
        d = json.loads(line)
        return cls(
            case_id=int(d["case_id"]),
            initial_failed=tuple(int(x) for x in d["initial_failed"]),
            final_failed=tuple(int(x) for x in d["final_failed"]),
            seed=int(d["seed"]),
            model_tag=str(d["model"]),
        )


def substream(seed: int, name: str, *ids: int) -> np.random.Generator:
    """Independent generator for a named stream; ordering of callers never matters."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode()), *ids]))


# ------------------------------------------------------------ dependency oracle


class _Structure:
    """Per-graph matrices the oracle needs; built once and cached weakly."""

    def __init__(self, g: HeteroGraph):
        n = g.num_nodes
        self.n = n
        self.intra = g.adjacency([RelationKind.ELEC_ELEC, RelationKind.ROAD_ROAD, RelationKind.COM_COM])
        self.intra_deg = np.asarray(self.intra.sum(axis=1)).ravel()
        lay = g.layers
        self.is_aoi = lay == LayerKind.AOI
        self.is_elec = lay == LayerKind.ELECTRIC
        self.is_com = lay == LayerKind.COM
        self.is_road = lay == LayerKind.ROAD

        def one_sided(rel: RelationKind, consumer: LayerKind) -> sp.csr_matrix:
            # rows restricted to consumer-layer nodes: consumer x supplier incidence
            a = g.relation_adjacency(rel)
            mask = sp.diags((lay == consumer).astype(float))
            return (mask @ a).tocsr()

        self.elec_to_aoi = one_sided(RelationKind.ELEC_AOI, LayerKind.AOI)
        self.com_to_aoi = one_sided(RelationKind.COM_AOI, LayerKind.AOI)
        self.elec_to_com = one_sided(RelationKind.ELEC_COM, LayerKind.COM)
        self.com_to_elec = one_sided(RelationKind.ELEC_COM, LayerKind.ELECTRIC)
        self.elec_to_road = one_sided(RelationKind.ELEC_ROAD, LayerKind.ROAD)
        self.deg = {
            k: np.asarray(getattr(self, k).sum(axis=1)).ravel()
            for k in ("elec_to_aoi", "com_to_aoi", "elec_to_com", "com_to_elec", "elec_to_road")
        }
        self.layer_adj = {}
        self.layer_nodes = {}
        self.layer_sources = {}
        for layer, rel in ((LayerKind.ELECTRIC, RelationKind.ELEC_ELEC), (LayerKind.COM, RelationKind.COM_COM)):
            nodes = g.layer_nodes[layer]
            self.layer_nodes[layer] = nodes
            a = g.relation_adjacency(rel)[nodes][:, nodes].tocsr()
            rows = np.repeat(np.arange(nodes.size), np.diff(a.indptr))
            self.layer_adj[layer] = (a.indptr, a.indices, rows)
            self.layer_sources[layer] = g.tiers[nodes] == 0


_CACHE: "weakref.WeakKeyDictionary[HeteroGraph, _Structure]" = weakref.WeakKeyDictionary()


def _structure(g: HeteroGraph) -> _Structure:
    s = _CACHE.get(g)
    if s is None:
        s = _CACHE[g] = _Structure(g)
    return s


def _step(st: _Structure, failed: np.ndarray, p: CascadeParams) -> np.ndarray:
    f = failed.astype(np.float64)
    new = failed.copy()
    if p.intra_threshold < 1.0:
        frac = np.divide(st.intra @ f, st.intra_deg, out=np.zeros(st.n), where=st.intra_deg > 0)
        new |= frac > p.intra_threshold
    if p.supplier_rule:
        all_power_lost = (st.deg["elec_to_aoi"] > 0) & (st.elec_to_aoi @ f >= st.deg["elec_to_aoi"])
        signal_lost = 2.0 * (st.com_to_aoi @ f) > st.deg["com_to_aoi"]
        new |= st.is_aoi & (all_power_lost | (signal_lost & (st.deg["com_to_aoi"] > 0)))
    if p.mutual_percolation:
        for key in ("elec_to_com", "com_to_elec", "elec_to_road"):
            d = st.deg[key]
            new |= (d > 0) & (getattr(st, key) @ f >= d)
        for layer in (LayerKind.ELECTRIC, LayerKind.COM):
            nodes = st.layer_nodes[layer]
            if nodes.size == 0:
                continue
            alive = ~failed[nodes]
            _, indices, rows = st.layer_adj[layer]
            keep = alive[rows] & alive[indices]
            sub_ptr = np.concatenate([[0], np.cumsum(np.bincount(rows[keep], minlength=nodes.size))])
            sub_idx = indices[keep]
            sub = sp.csr_matrix((np.ones(sub_idx.size, dtype=np.int8), sub_idx, sub_ptr), shape=(nodes.size,) * 2)
            _, lab = csgraph.connected_components(sub, directed=False)
            fed = np.zeros(lab.max() + 1, dtype=bool)
            fed[lab[alive & st.layer_sources[layer]]] = True
            new[nodes] |= ~fed[lab]
    return new


def dependency_cascade(
    g: HeteroGraph,
    initial: Iterable[int],
    params: CascadeParams = CascadeParams(),
    *,
    case_id: int = 0,
    seed: int = 0,
) -> CascadeRecord:
    d = failed_set(initial, g.num_nodes)
    if d.size == 0:
        return CascadeRecord(case_id, (), (), seed, "dependency")
    st = _structure(g)
    failed = np.zeros(g.num_nodes, dtype=bool)
    failed[d] = True
    for rounds in range(1, params.max_rounds + 1):
        nxt = _step(st, failed, params)
        if np.array_equal(nxt, failed):
            final = tuple(np.flatnonzero(failed).tolist())
            return CascadeRecord(case_id, tuple(d.tolist()), final, seed, "dependency")
        failed = nxt
    raise CascadeError(
        f"no fixed point after {params.max_rounds} rounds ({int(failed.sum())} failed so far)",
        np.flatnonzero(failed),
        params.max_rounds,
    )


# ------------------------------------------------------------------------- ICM


def _edge_probs(g: HeteroGraph, prob) -> np.ndarray:
    if isinstance(prob, Mapping):
        table = np.zeros(len(RelationKind))
        for k, v in prob.items():
            r = RelationKind.parse(k) if isinstance(k, str) else RelationKind(k)
            table[r] = float(v)
    else:
        table = np.full(len(RelationKind), float(prob))
    if np.any((table < 0) | (table > 1)):
        raise ValueError("activation probabilities must be in [0, 1]")
    return table[g.rel.astype(np.int64)]


def icm_predict(g: HeteroGraph, initial: Iterable[int], prob, seed: int) -> np.ndarray:
    """One independent-cascade run.

    Each edge is live with its relation's probability (drawn once per run,
    the live-edge view of independent activation); the result is everything
    reachable from ``initial`` over live edges.
    """
    d = failed_set(initial, g.num_nodes)
    pe = _edge_probs(g, prob)
    if d.size == 0:
        return d
    rng = np.random.default_rng(seed)
    live = rng.random(pe.size) < pe
    return _reach(g, d, live)


def _reach(g: HeteroGraph, d: np.ndarray, live: np.ndarray) -> np.ndarray:
    n = g.num_nodes
    if not live.any():
        return d
    s, t = g.src[live], g.dst[live]
    a = sp.csr_matrix((np.ones(2 * s.size), (np.concatenate([s, t]), np.concatenate([t, s]))), shape=(n, n))
    _, lab = csgraph.connected_components(a, directed=False)
    hit = np.zeros(lab.max() + 1, dtype=bool)
    hit[lab[d]] = True
    return np.flatnonzero(hit[lab])


def icm_frequency(g: HeteroGraph, initial: Iterable[int], prob, runs: int, seed: int) -> np.ndarray:
    """Per-node activation frequency over ``runs`` independent runs (a score in [0, 1])."""
    d = failed_set(initial, g.num_nodes)
    pe = _edge_probs(g, prob)
    freq = np.zeros(g.num_nodes)
    if d.size == 0 or runs <= 0:
        return freq
    n = g.num_nodes
    rng = substream(seed, "icm")
    live = rng.random((runs, pe.size)) < pe
    # one block-diagonal graph holding every run
    r_idx, e_idx = np.nonzero(live)
    s = g.src[e_idx] + r_idx * n
    t = g.dst[e_idx] + r_idx * n
    big = sp.csr_matrix((np.ones(2 * s.size), (np.concatenate([s, t]), np.concatenate([t, s]))), shape=(runs * n,) * 2)
    _, lab = csgraph.connected_components(big, directed=False)
    seeds = (d[None, :] + n * np.arange(runs)[:, None]).ravel()
    hit = np.zeros(lab.max() + 1, dtype=bool)
    hit[lab[seeds]] = True
    freq = hit[lab].reshape(runs, n).mean(axis=0)
    return freq


# -------------------------------------------------------------------- datasets


def build_dataset(
    g: HeteroGraph,
    count_per_size: int,
    size_range: Sequence[int],
    params: CascadeParams = CascadeParams(),
    seed: int = 0,
    candidates: Sequence[int] | None = None,
) -> list[CascadeRecord]:
    """``count_per_size`` records for every initial-failure size in ``size_range``.

    Initial sets are drawn uniformly without replacement from ``candidates``
    (default: every node) with one generator per case, so the stream does
    not depend on evaluation order.
    """
    sizes = list(size_range)
    if not sizes:
        raise ValueError("size_range must be non-empty")
    pool = np.arange(g.num_nodes) if candidates is None else failed_set(candidates, g.num_nodes)
    for i in sizes:
        if i < 0 or i > pool.size:
            raise ConfigError(f"initial-failure size {i} exceeds the {pool.size} candidate nodes")
    records = []
    case_id = 0
    for i in sizes:
        for _ in range(count_per_size):
            rng = substream(seed, "simulate", case_id)
            d = np.sort(rng.choice(pool, size=i, replace=False)) if i else np.zeros(0, dtype=np.int64)
            records.append(dependency_cascade(g, d, params, case_id=case_id, seed=seed))
            case_id += 1
    return records


@dataclass
class SweepResult:
    sizes: np.ndarray
    fraction: np.ndarray  # mean final failed fraction per seed size
    std: np.ndarray
    transition_index: int

    def rows(self):
        for i, f, s in zip(self.sizes, self.fraction, self.std):
            yield int(i), float(f), float(s)


def transition_index(curve: Sequence[float]) -> int:
    """Index i maximising the forward difference curve[i+1] - curve[i] (first on ties)."""
    c = np.asarray(curve, dtype=float)
    if c.size < 2:
        return 0
    return int(np.argmax(np.diff(c)))


def sweep_seed_sets(
    num_nodes: int,
    max_seed_size: int,
    reps: int,
    seed: int = 0,
    candidates: Sequence[int] | None = None,
) -> list[list[np.ndarray]]:
    """Seed sets for a sweep, indexed ``[rep][size]``.

    Each repetition draws one random ordering of the candidate pool and uses
    its prefixes, so the sets grow by one node at a time. Per-repetition
    curves are then monotone and the averaged curve is far less noisy than
    with independent draws per size.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    pool = np.arange(num_nodes) if candidates is None else failed_set(candidates, num_nodes)
    top = min(max_seed_size, pool.size)
    out = []
    for r in range(reps):
        order = substream(seed, "sweep", r).permutation(pool)
        out.append([np.sort(order[:i]) for i in range(top + 1)])
    return out


def phase_sweep(
    g: HeteroGraph,
    params: CascadeParams,
    max_seed_size: int,
    reps: int,
    seed: int = 0,
    candidates: Sequence[int] | None = None,
) -> SweepResult:
    sets = sweep_seed_sets(g.num_nodes, max_seed_size, reps, seed, candidates)
    vals = np.array(
        [[len(dependency_cascade(g, d, params).final_failed) / g.num_nodes for d in row] for row in sets]
    )
    frac = vals.mean(axis=0)
    return SweepResult(np.arange(vals.shape[1]), frac, vals.std(axis=0), transition_index(frac))


# ------------------------------------------------------------------------- I/O


def write_records(records: Iterable[CascadeRecord], fh: io.TextIOBase, meta: dict | None = None) -> None:
    if meta is not None:
        fh.write(json.dumps({"meta": meta}, sort_keys=True, separators=(",", ":")) + "\n")
    for r in records:
        fh.write(r.to_json() + "\n")


def read_records(fh: io.TextIOBase) -> list[CascadeRecord]:
    out = []
    for lineno, line in enumerate(fh, 1):
        line = line.strip()
        if not line:
            continue
        try:
            if line.startswith('{"meta"'):
                continue
            out.append(CascadeRecord.from_json(line))
        except (KeyError, ValueError, TypeError) as exc:
            raise ValueError(f"bad cascade record on line {lineno}: {exc}") from None
    return out
