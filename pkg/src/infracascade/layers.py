"""Graph layers: symmetric-normalised GCN, relational GCN and DiffPool coarsening.

Batches of graphs that share one topology are handled by stacking node rows
case after case; sparse operators are repeated block-diagonally and dense
per-case matrices go through the block matmul primitives.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, SparseAdj, Tensor
from .graph import HeteroGraph, RelationKind

ACTIVATIONS = {
    "identity": lambda t: t,
    "relu": ad.relu,
    "sigmoid": ad.sigmoid,
    "tanh": ad.tanh,
}


def glorot(rng: np.random.Generator, d_in: int, d_out: int) -> Tensor:
    lim = np.sqrt(6.0 / (d_in + d_out))
    return ad.parameter(rng.uniform(-lim, lim, size=(d_in, d_out)))


def _activate(tag: str, t: Tensor) -> Tensor:
    try:
        return ACTIVATIONS[tag](t)
    except KeyError:
        raise ContractError(f"unknown activation {tag!r}") from None


def sym_adj(g: HeteroGraph, relations=None) -> SparseAdj:
    """D^-1/2 (A + I) D^-1/2 over the union of ``relations`` (all by default)."""
    return SparseAdj(g.adjacency(relations), mode="sym")


def relation_adjs(g: HeteroGraph) -> dict[RelationKind, SparseAdj]:
    """Mean-normalised adjacency for every relation with at least one edge."""
    return {r: SparseAdj(g.relation_adjacency(r), mode="mean") for r in g.relations_present()}


# ----------------------------------------------------------------- GCN


@dataclass
class GcnLayer:
    W: Tensor
    b: Tensor
    activation: str = "relu"

    @classmethod
    def init(cls, rng: np.random.Generator, d_in: int, d_out: int, activation: str = "relu") -> "GcnLayer":
        return cls(glorot(rng, d_in, d_out), ad.parameter(np.zeros((1, d_out))), activation)

    @property
    def d_in(self) -> int:
        return self.W.shape[0]

    @property
    def d_out(self) -> int:
        return self.W.shape[1]

    def parameters(self, prefix: str = "gcn.0") -> dict[str, Tensor]:
        return {f"{prefix}.W": self.W, f"{prefix}.b": self.b}


def gcn_forward(layer: GcnLayer, adj: SparseAdj, X: Tensor) -> Tensor:
    """act(Â X W + b) with Â the normalised adjacency carried by ``adj``."""
    X = ad.as_tensor(X)
    if X.data.ndim != 2 or X.shape[1] != layer.d_in:
        raise ContractError(f"gcn_forward: input {X.shape} does not match weight {layer.W.shape}")
    if adj.shape[0] != X.shape[0]:
        raise ContractError(f"gcn_forward: adjacency {adj.shape} does not match input {X.shape}")
    h = ad.sparse_matmul(adj, ad.matmul(X, layer.W))
    return _activate(layer.activation, ad.add(h, layer.b))


def dense_sym_propagate(A: Tensor, Y: Tensor, blocks: int = 1) -> Tensor:
    """Apply D^-1/2 (A + I) D^-1/2 to Y, per block, differentiably in A."""
    dinv = ad.power(ad.add(ad.row_sum(A), 1.0), -0.5)
    scaled = ad.mul(dinv, Y)
    return ad.mul(dinv, ad.add(ad.block_matmul(A, scaled, blocks), scaled))


def gcn_dense(layer: GcnLayer, A: Tensor, X: Tensor, blocks: int = 1) -> Tensor:
    """GCN layer over dense (possibly learned) per-block adjacency."""
    if X.shape[1] != layer.d_in:
        raise ContractError(f"gcn_dense: input {X.shape} does not match weight {layer.W.shape}")
    h = dense_sym_propagate(A, ad.matmul(X, layer.W), blocks)
    return _activate(layer.activation, ad.add(h, layer.b))


@dataclass
class Dense:
    W: Tensor
    b: Tensor
    activation: str = "identity"

    @classmethod
    def init(cls, rng: np.random.Generator, d_in: int, d_out: int, activation: str = "identity") -> "Dense":
        return cls(glorot(rng, d_in, d_out), ad.parameter(np.zeros((1, d_out))), activation)

    def __call__(self, X: Tensor) -> Tensor:
        return _activate(self.activation, ad.add(ad.matmul(X, self.W), self.b))

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.W": self.W, f"{prefix}.b": self.b}


# ---------------------------------------------------------------- RGCN


@dataclass
class RgcnLayer:
    """Per-relation weights plus a self weight; bias is optional."""

    weights: dict[RelationKind, Tensor]
    W0: Tensor
    activation: str = "relu"
    b: Tensor | None = None

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        d_in: int,
        d_out: int,
        relations: Sequence[RelationKind] = tuple(RelationKind),
        activation: str = "relu",
        bias: bool = False,
    ) -> "RgcnLayer":
        weights = {RelationKind(r): glorot(rng, d_in, d_out) for r in relations}
        b = ad.parameter(np.zeros((1, d_out))) if bias else None
        return cls(weights, glorot(rng, d_in, d_out), activation, b)

    @property
    def d_in(self) -> int:
        return self.W0.shape[0]

    def parameters(self, prefix: str = "rgcn.0") -> dict[str, Tensor]:
        out = {f"{prefix}.{r.label}.W": w for r, w in sorted(self.weights.items())}
        out[f"{prefix}.self.W"] = self.W0
        if self.b is not None:
            out[f"{prefix}.b"] = self.b
        return out


def rgcn_forward(layer: RgcnLayer, adj_per_relation: Mapping[RelationKind, SparseAdj], H: Tensor) -> Tensor:
    """act( sum_r A_r H W_r + H W0 [+ b] ), A_r row-normalised by |N_i^r|."""
    H = ad.as_tensor(H)
    if H.data.ndim != 2 or H.shape[1] != layer.d_in:
        raise ContractError(f"rgcn_forward: input {H.shape} does not match weights ({layer.d_in}, ·)")
    out = ad.matmul(H, layer.W0)
    for rel in sorted(adj_per_relation):
        if rel not in layer.weights:
            raise ContractError(f"rgcn_forward: no weight for relation {RelationKind(rel).label}")
        adj = adj_per_relation[rel]
        if adj.matrix.nnz == 0:
            continue
        out = ad.add(out, ad.sparse_matmul(adj, ad.matmul(H, layer.weights[rel])))
    if layer.b is not None:
        out = ad.add(out, layer.b)
    return _activate(layer.activation, out)


# ------------------------------------------------------------- DiffPool


@dataclass
class DiffPoolLevel:
    """One coarsening level: embedding GCN, assignment GCN, cluster count."""

    embed: GcnLayer
    pool: GcnLayer
    clusters: int

    @classmethod
    def init(cls, rng: np.random.Generator, d_in: int, d_hidden: int, clusters: int) -> "DiffPoolLevel":
        return cls(
            GcnLayer.init(rng, d_in, d_hidden, "relu"),
            GcnLayer.init(rng, d_in, clusters, "identity"),
            clusters,
        )

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {**self.embed.parameters(f"{prefix}.embed"), **self.pool.parameters(f"{prefix}.pool")}


def pool_algebra(S: Tensor, Z: Tensor, A: Tensor, blocks: int = 1) -> tuple[Tensor, Tensor]:
    """Coarsened features S^T Z and adjacency S^T A S, per block."""
    X_new = ad.block_tmatmul(S, Z, blocks)
    A_new = ad.block_tmatmul(S, ad.block_matmul(A, S, blocks), blocks)
    return X_new, A_new


def _check_symmetric(A: np.ndarray, blocks: int) -> None:
    n = A.shape[1]
    if A.shape[0] != blocks * n:
        raise ContractError(f"diffpool: adjacency {A.shape} is not {blocks} square blocks")
    M = A.reshape(blocks, n, n)
    tol = 1e-9 * max(1.0, float(np.abs(M).max(initial=0.0)))
    if np.abs(M - M.transpose(0, 2, 1)).max(initial=0.0) > tol:
        raise ContractError("diffpool: adjacency is not symmetric")
    if M.min(initial=0.0) < 0:
        raise ContractError("diffpool: adjacency has negative entries")


def diffpool_step(level: DiffPoolLevel, A: Tensor, X: Tensor, blocks: int = 1) -> tuple[Tensor, Tensor, Tensor]:
    """Dense coarsening step; returns (X', A', S)."""
    A, X = ad.as_tensor(A), ad.as_tensor(X)
    _check_symmetric(A.data, blocks)
    Z = gcn_dense(level.embed, A, X, blocks)
    S = ad.row_softmax(gcn_dense(level.pool, A, X, blocks))
    X_new, A_new = pool_algebra(S, Z, A, blocks)
    return X_new, A_new, S


def diffpool_sparse_step(
    level: DiffPoolLevel, norm_adj: SparseAdj, raw_adj: SparseAdj, X: Tensor, blocks: int = 1
) -> tuple[Tensor, Tensor, Tensor]:
    """First coarsening step over a sparse (block-diagonal) input graph."""
    Z = gcn_forward(level.embed, norm_adj, X)
    S = ad.row_softmax(gcn_forward(level.pool, norm_adj, X))
    X_new = ad.block_tmatmul(S, Z, blocks)
    A_new = ad.block_tmatmul(S, ad.sparse_matmul(raw_adj, S), blocks)
    return X_new, A_new, S


def compose_assignments(S_list: Sequence[np.ndarray], level: int, blocks: int = 1) -> np.ndarray:
    """Product S^(0) ... S^(level-1) per block, as a stacked array."""
    if not 1 <= level <= len(S_list):
        raise ContractError(f"level {level} out of range 1..{len(S_list)}")
    out = np.asarray(S_list[0])
    for S in S_list[1:level]:
        S = np.asarray(S)
        rows = out.shape[0] // blocks
        k = S.shape[0] // blocks
        out = (out.reshape(blocks, rows, k) @ S.reshape(blocks, k, S.shape[1])).reshape(blocks * rows, -1)
    return out


def hard_assignments(S_list: Sequence[np.ndarray], level: int, blocks: int = 1) -> np.ndarray:
    """Cluster id of every node at ``level``; ties go to the lowest id."""
    return np.argmax(compose_assignments(S_list, level, blocks), axis=1)


def hard_assignment(S_list: Sequence[np.ndarray], node: int, level: int) -> int:
    return int(hard_assignments(S_list, level)[node])
