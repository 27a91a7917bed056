"""Pre-training tasks producing per-scope node embeddings.

Three tasks run on every scope (the coupled graph and each layer subgraph):

* link prediction -- a free embedding table trained with a margin loss on
  edges against freshly sampled non-edges (``E_lp``);
* global pooling -- a DiffPool stack regressing the mean initial-failure
  distance of a case; its hard cluster assignments turn per-cluster mean
  distances into the per-case offsets ``E_gp``;
* inference -- a two-network EM scheme (a feature GCN and a label-belief
  network) trained on the initial failures plus far-away anchors; the
  feature network's last hidden layer is ``E_ie``.

``E_lp`` is fixed per scope; ``E_gp`` and ``E_ie`` are recomputed for every
initial failed set.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, SparseAdj, Tape, Tensor
from .cascade import substream
from .graph import HeteroGraph, LayerKind, failed_set, source_distance_matrix
from .layers import Dense, DiffPoolLevel, GcnLayer, diffpool_sparse_step, diffpool_step, gcn_forward, hard_assignments
from .netgen import ConfigError

log = logging.getLogger(__name__)

SCOPES = ("coupled", "electric", "road", "com", "aoi")


# ------------------------------------------------------------------ configs


@dataclass(frozen=True)
class LpConfig:
    margin: float = 1.0
    l2: float = 1e-4
    negatives: int = 1
    epochs: int = 200
    lr: float = 1e-2
    dim: int = 32

    def __post_init__(self):
        if self.margin <= 0 or self.l2 < 0 or self.negatives < 1:
            raise ConfigError("LpConfig needs margin > 0, l2 >= 0 and negatives >= 1")


@dataclass(frozen=True)
class GpConfig:
    levels: int = 3
    clusters: tuple[int, ...] = (16, 4)
    hidden: int = 16
    steps: int = 200
    batch_cases: int = 16
    lr: float = 1e-2

    def __post_init__(self):
        object.__setattr__(self, "clusters", tuple(int(c) for c in self.clusters))
        if self.levels < 2:
            raise ConfigError("global pooling needs at least 2 levels")
        if len(self.clusters) != self.levels - 1:
            raise ConfigError(f"expected {self.levels - 1} cluster counts, got {len(self.clusters)}")
        if any(later >= earlier for earlier, later in zip(self.clusters, self.clusters[1:])) or min(self.clusters) < 1:
            raise ConfigError("cluster counts must be positive and strictly decreasing")


@dataclass(frozen=True)
class IeConfig:
    dim: int = 32
    steps: int = 200
    em_rounds: int = 2
    batch_cases: int = 16
    lr: float = 1e-2
    anchor_fraction: float = 0.75


@dataclass(frozen=True)
class PretrainConfig:
    lp: LpConfig = LpConfig()
    gp: GpConfig = GpConfig()
    ie: IeConfig = IeConfig()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gp"]["clusters"] = list(self.gp.clusters)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainConfig":
        try:
            return cls(LpConfig(**d.get("lp", {})), GpConfig(**d.get("gp", {})), IeConfig(**d.get("ie", {})))
        except TypeError as exc:
            raise ConfigError(f"bad pretraining config: {exc}") from None


# ------------------------------------------------------------------ scopes


class ScopeView:
    """A scope graph with the id maps and operators the tasks share."""

    def __init__(self, name: str, graph: HeteroGraph, ids: np.ndarray, parent_nodes: int):
        self.name = name
        self.graph = graph
        self.ids = np.asarray(ids, dtype=np.int64)
        self.local = np.full(parent_nodes, -1, dtype=np.int64)
        self.local[self.ids] = np.arange(self.ids.size)
        self.sym = SparseAdj(graph.adjacency(), mode="sym")
        self.raw = SparseAdj(graph.adjacency())
        self.mean = SparseAdj(graph.adjacency(), mode="mean")
        self._blocks: dict[tuple[str, int], SparseAdj] = {}

    @property
    def size(self) -> int:
        return self.graph.num_nodes

    def block(self, kind: str, blocks: int) -> SparseAdj:
        key = (kind, blocks)
        if key not in self._blocks:
            self._blocks[key] = getattr(self, kind).block_diag(blocks)
        return self._blocks[key]

    def to_local(self, initial) -> np.ndarray:
        loc = self.local[failed_set(initial, self.local.size)]
        return np.sort(loc[loc >= 0])


def scope_views(g: HeteroGraph) -> dict[str, ScopeView]:
    views = {"coupled": ScopeView("coupled", g, np.arange(g.num_nodes), g.num_nodes)}
    for layer in LayerKind:
        sub, ids = g.layer_subgraph(layer)
        if ids.size == 0:
            log.warning("layer %s has no nodes; scope skipped", layer.label)
            continue
        views[layer.label] = ScopeView(layer.label, sub, ids, g.num_nodes)
    return views


def _initial_sets(dataset) -> list[np.ndarray]:
    out = []
    for item in dataset:
        d = getattr(item, "initial_failed", item)
        out.append(np.asarray(sorted(int(x) for x in d), dtype=np.int64))
    return out


def case_distances(g: HeteroGraph, initial) -> tuple[np.ndarray, np.ndarray]:
    """Nearest and summed capped hop distance from the initial failed set, per node."""
    d = failed_set(initial, g.num_nodes)
    if d.size == 0:
        raise ValueError("distances need a non-empty initial failed set")
    m = source_distance_matrix(g, d)
    return m.min(axis=0), m.sum(axis=0)


# --------------------------------------------------------- link prediction


def lp_score(E, edges) -> np.ndarray:
    """Inner product of endpoint rows for every edge."""
    E = E.data if isinstance(E, Tensor) else np.asarray(E, dtype=np.float64)
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if e.size and (e.min() < 0 or e.max() >= E.shape[0]):
        raise ValueError(f"edge endpoint out of range for {E.shape[0]} rows")
    return np.einsum("ij,ij->i", E[e[:, 0]], E[e[:, 1]])


def _scores(E: Tensor, edges: np.ndarray) -> Tensor:
    return ad.row_sum(ad.mul(ad.index_rows(E, edges[:, 0]), ad.index_rows(E, edges[:, 1])))


def lp_loss(E: Tensor, positive, negative, margin: float, l2: float) -> Tensor:
    """Mean hinge max(0, M - S_p + S_n) over (positive, negative) pairs plus l2*||E||^2.

    ``negative`` holds ``k`` rows per positive edge, grouped by positive.
    """
    pos = np.asarray(positive, dtype=np.int64).reshape(-1, 2)
    neg = np.asarray(negative, dtype=np.int64).reshape(-1, 2)
    if pos.shape[0] == 0 or neg.shape[0] == 0:
        raise ValueError("lp_loss needs non-empty positive and negative edge sets")
    if neg.shape[0] % pos.shape[0]:
        raise ValueError("negative edges must come in equal groups per positive edge")
    k = neg.shape[0] // pos.shape[0]
    sp_ = ad.index_rows(_scores(E, pos), np.repeat(np.arange(pos.shape[0]), k))
    hinge = ad.relu(ad.add(ad.sub(_scores(E, neg), sp_), margin))
    return ad.add(ad.reduce_mean(hinge), ad.scalar_mul(ad.reduce_sum(ad.square(E)), l2))


def sample_non_edges(g: HeteroGraph, count: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform node pairs (u != v) that are not edges of ``g``."""
    n = g.num_nodes
    if n < 2:
        raise ConfigError("negative sampling needs at least two nodes")
    if g.num_edges >= n * (n - 1) // 2:
        raise ConfigError("negative sampling impossible: the graph is complete")
    adj = g.adjacency()
    out = np.zeros((0, 2), dtype=np.int64)
    while out.shape[0] < count:
        need = count - out.shape[0]
        u = rng.integers(0, n, size=2 * need + 8)
        v = rng.integers(0, n, size=2 * need + 8)
        ok = (u != v) & (np.asarray(adj[u, v]).ravel() == 0)
        out = np.vstack([out, np.stack([u[ok], v[ok]], axis=1)[:need]])
    return out


def train_lp(g: HeteroGraph, cfg: LpConfig = LpConfig(), seed: int = 0) -> tuple[np.ndarray, list[float]]:
    """Train a free embedding table; returns (E_lp, per-epoch loss)."""
    if g.num_edges == 0:
        raise ConfigError("link prediction needs a graph with at least one edge")
    rng = substream(seed, "lp")
    E = ad.parameter(rng.normal(scale=0.1, size=(g.num_nodes, cfg.dim)))
    pos = np.stack([g.src, g.dst], axis=1).astype(np.int64)
    opt = Adam([E], lr=cfg.lr)
    history = []
    for _ in range(cfg.epochs):
        neg = sample_non_edges(g, pos.shape[0] * cfg.negatives, rng)
        opt.zero_grad()
        with Tape():
            loss = lp_loss(E, pos, neg, cfg.margin, cfg.l2)
        ad.backward(loss)
        opt.step()
        history.append(loss.item())
    return E.data.copy(), history


# ---------------------------------------------------------- global pooling


def build_gd_features(g: HeteroGraph, initial) -> np.ndarray:
    """Columns: initial state bit (0 for initial failures), capped hop distance to them."""
    d = failed_set(initial, g.num_nodes)
    if d.size == 0:
        raise ValueError("features need a non-empty initial failed set")
    near, _ = case_distances(g, d)
    state = np.ones(g.num_nodes)
    state[d] = 0.0
    return np.stack([state, near], axis=1)


def cluster_offsets(values: np.ndarray, assignment: np.ndarray) -> np.ndarray:
    """Mean of ``values`` over each node's cluster minus the global mean."""
    values = np.asarray(values, dtype=np.float64)
    assignment = np.asarray(assignment, dtype=np.int64)
    k = int(assignment.max()) + 1 if assignment.size else 0
    sums = np.bincount(assignment, weights=values, minlength=k)
    counts = np.bincount(assignment, minlength=k)
    means = sums / np.maximum(counts, 1)
    return means[assignment] - values.mean()


def rmse(pred, target) -> float:
    p, t = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    return float(np.sqrt(np.mean((p - t) ** 2)))


@dataclass
class GpStack:
    levels: list[DiffPoolLevel]
    readout: Dense
    feat_mean: np.ndarray
    feat_std: np.ndarray
    target_mean: float
    target_std: float
    trained: bool = False
    history: list[float] = field(default_factory=list)

    @property
    def depth(self) -> int:
        """Number of levels including the input graph."""
        return len(self.levels) + 1

    def parameters(self, prefix: str = "gp") -> dict[str, Tensor]:
        out = {}
        for i, lvl in enumerate(self.levels):
            out.update(lvl.parameters(f"{prefix}.diffpool.{i}"))
        out.update(self.readout.parameters(f"{prefix}.readout"))
        return out

    def state(self, prefix: str = "gp") -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.parameters(prefix).items()}
        out[f"{prefix}.scale"] = np.concatenate([self.feat_mean, self.feat_std, [self.target_mean, self.target_std]])
        return out

    @classmethod
    def from_state(cls, arrays: dict[str, np.ndarray], prefix: str = "gp") -> "GpStack":
        levels = []
        i = 0
        while f"{prefix}.diffpool.{i}.embed.W" in arrays:
            p = f"{prefix}.diffpool.{i}"
            emb = GcnLayer(ad.parameter(arrays[f"{p}.embed.W"]), ad.parameter(arrays[f"{p}.embed.b"]), "relu")
            pool = GcnLayer(ad.parameter(arrays[f"{p}.pool.W"]), ad.parameter(arrays[f"{p}.pool.b"]), "identity")
            levels.append(DiffPoolLevel(emb, pool, pool.d_out))
            i += 1
        readout = Dense(ad.parameter(arrays[f"{prefix}.readout.W"]), ad.parameter(arrays[f"{prefix}.readout.b"]))
        sc = arrays[f"{prefix}.scale"]
        return cls(levels, readout, sc[0:2].copy(), sc[2:4].copy(), float(sc[4]), float(sc[5]), trained=True)

    def forward(self, view: ScopeView, X: np.ndarray, blocks: int) -> tuple[Tensor, list[Tensor]]:
        """Standardised target prediction per block plus the soft assignments."""
        Xs = ad.Tensor((X - self.feat_mean) / self.feat_std)
        first = self.levels[0]
        H, A, S = diffpool_sparse_step(first, view.block("sym", blocks), view.block("raw", blocks), Xs, blocks)
        S_list = [S]
        for lvl in self.levels[1:]:
            H, A, S = diffpool_step(lvl, A, H, blocks)
            S_list.append(S)
        k = self.levels[-1].clusters
        pool = SparseAdj(_block_mean_matrix(blocks, k))
        return self.readout(ad.sparse_matmul(pool, H)), S_list

    def assignments(self, view: ScopeView, sets: Sequence[np.ndarray], X: np.ndarray | None = None) -> list[list[np.ndarray]]:
        """Hard cluster ids per case (local ids in ``sets``) and level 1..L-1."""
        if not self.trained:
            raise ValueError("global-pooling stack is not trained")
        blocks = len(sets)
        if X is None:
            X = np.vstack([build_gd_features(view.graph, d) for d in sets])
        _, S_list = self.forward(view, X, blocks)
        S_np = [s.data for s in S_list]
        per_level = [hard_assignments(S_np, lvl, blocks).reshape(blocks, -1) for lvl in range(1, len(S_np) + 1)]
        return [[lv[b] for lv in per_level] for b in range(blocks)]


def _block_mean_matrix(blocks: int, k: int):
    import scipy.sparse as sp

    rows = np.repeat(np.arange(blocks), k)
    return sp.csr_matrix((np.full(blocks * k, 1.0 / k), (rows, np.arange(blocks * k))), shape=(blocks, blocks * k))


def _gp_batch(view: ScopeView, sets: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    X, y = [], []
    for d in sets:
        near, total = case_distances(view.graph, d)
        state = np.ones(view.size)
        state[d] = 0.0
        X.append(np.stack([state, near], axis=1))
        y.append(total.mean())
    return np.vstack(X), np.asarray(y)


def _scope_graph(g) -> tuple[ScopeView, bool]:
    """Accept a graph or a ScopeView; node ids are always the scope's own ids."""
    if isinstance(g, ScopeView):
        return g, False
    return ScopeView("graph", g, np.arange(g.num_nodes), g.num_nodes), True


def train_gp(g, dataset, cfg: GpConfig = GpConfig(), seed: int = 0) -> GpStack:
    """Fit a DiffPool stack regressing the mean initial-failure distance.

    ``dataset`` yields initial failed sets (or records); cases with an empty
    set are skipped. Features and targets are standardised over the cases.
    """
    view, _ = _scope_graph(g)
    sets = [d for d in _initial_sets(dataset) if d.size]
    if not sets:
        raise ConfigError("global pooling needs at least one case with initial failures")
    rng = substream(seed, "gp")
    X_all, y_all = _gp_batch(view, sets)
    feat_mean = X_all.mean(axis=0)
    feat_std = X_all.std(axis=0)
    feat_std[feat_std < 1e-12] = 1.0
    t_mean, t_std = float(y_all.mean()), float(y_all.std())
    if t_std < 1e-12:
        t_std = 1.0
    dims = [2] + [cfg.hidden] * (cfg.levels - 1)
    levels = [DiffPoolLevel.init(rng, dims[i], cfg.hidden, cfg.clusters[i]) for i in range(cfg.levels - 1)]
    stack = GpStack(levels, Dense.init(rng, cfg.hidden, 1), feat_mean, feat_std, t_mean, t_std)
    params = list(stack.parameters().values())
    opt = Adam(params, lr=cfg.lr)
    n = view.size
    y_std = (y_all - t_mean) / t_std

    def loss_on(idx):
        Xb = X_all.reshape(len(sets), n, 2)[idx].reshape(-1, 2)
        pred, _ = stack.forward(view, Xb, len(idx))
        mse = ad.reduce_mean(ad.square(ad.sub(pred, y_std[idx][:, None])))
        return ad.sqrt(ad.add(mse, 1e-12))

    batch = min(cfg.batch_cases, len(sets))
    for _ in range(cfg.steps):
        idx = np.sort(rng.choice(len(sets), size=batch, replace=False))
        opt.zero_grad()
        with Tape():
            loss = loss_on(idx)
        ad.backward(loss)
        opt.step()
        stack.history.append(loss.item() * t_std)
    stack.trained = True
    return stack


def gp_predict(stack: GpStack, g, sets) -> np.ndarray:
    """Predicted mean initial-failure distance per case (original units)."""
    view, _ = _scope_graph(g)
    sets = _initial_sets(sets)
    X, _ = _gp_batch(view, sets)
    pred, _ = stack.forward(view, X, len(sets))
    return pred.data.ravel() * stack.target_std + stack.target_mean


def gp_embeddings(stack: GpStack, g, sets, chunk: int = 32) -> list[np.ndarray]:
    """E_gp for each initial failed set, in the scope's local ids.

    Entry (n, l) is the mean summed distance over the nodes sharing n's
    level-l cluster minus the graph-wide mean. Empty sets give zeros.
    """
    view, _ = _scope_graph(g)
    sets = _initial_sets(sets)
    width = stack.depth - 1
    out: list[np.ndarray | None] = [None] * len(sets)
    todo = [i for i, d in enumerate(sets) if d.size]
    for i, d in enumerate(sets):
        if not d.size:
            out[i] = np.zeros((view.size, width))
    for start in range(0, len(todo), chunk):
        part = todo[start : start + chunk]
        X, totals = [], []
        for i in part:
            near, total = case_distances(view.graph, sets[i])
            state = np.ones(view.size)
            state[sets[i]] = 0.0
            X.append(np.stack([state, near], axis=1))
            totals.append(total)
        assign = stack.assignments(view, [sets[i] for i in part], np.vstack(X))
        for i, levels, total in zip(part, assign, totals):
            out[i] = np.stack([cluster_offsets(total, a) for a in levels], axis=1)
    return out


def gp_embedding(stack: GpStack, g, initial) -> np.ndarray:
    return gp_embeddings(stack, g, [initial])[0]


# ---------------------------------------------------------------- inference


@dataclass
class IeModel:
    """Feature network q (two GCN layers and a linear head) and belief network p."""

    q1: GcnLayer
    q2: GcnLayer
    q_out: Dense
    p_hidden: Dense
    p_out: Dense
    trained: bool = False
    labeled_ll: list[float] = field(default_factory=list)

    @classmethod
    def init(cls, rng: np.random.Generator, dim: int) -> "IeModel":
        return cls(
            GcnLayer.init(rng, 1, dim, "relu"),
            GcnLayer.init(rng, dim, dim, "relu"),
            Dense.init(rng, dim, 2),
            Dense.init(rng, 3, dim, "relu"),
            Dense.init(rng, dim, 2),
        )

    def q_parameters(self, prefix: str = "ie") -> dict[str, Tensor]:
        return {
            **self.q1.parameters(f"{prefix}.q.0"),
            **self.q2.parameters(f"{prefix}.q.1"),
            **self.q_out.parameters(f"{prefix}.q.out"),
        }

    def p_parameters(self, prefix: str = "ie") -> dict[str, Tensor]:
        return {**self.p_hidden.parameters(f"{prefix}.p.0"), **self.p_out.parameters(f"{prefix}.p.out")}

    def state(self, prefix: str = "ie") -> dict[str, np.ndarray]:
        return {k: v.data for k, v in {**self.q_parameters(prefix), **self.p_parameters(prefix)}.items()}

    @classmethod
    def from_state(cls, arrays: dict[str, np.ndarray], prefix: str = "ie") -> "IeModel":
        def gcn(name):
            return GcnLayer(ad.parameter(arrays[f"{name}.W"]), ad.parameter(arrays[f"{name}.b"]), "relu")

        def dense(name, act="identity"):
            return Dense(ad.parameter(arrays[f"{name}.W"]), ad.parameter(arrays[f"{name}.b"]), act)

        return cls(
            gcn(f"{prefix}.q.0"),
            gcn(f"{prefix}.q.1"),
            dense(f"{prefix}.q.out"),
            dense(f"{prefix}.p.0", "relu"),
            dense(f"{prefix}.p.out"),
            trained=True,
        )

    def q_hidden(self, adj: SparseAdj, X) -> Tensor:
        return gcn_forward(self.q2, adj, gcn_forward(self.q1, adj, X))

    def q_logits(self, adj: SparseAdj, X) -> tuple[Tensor, Tensor]:
        h = self.q_hidden(adj, X)
        return h, self.q_out(h)

    def p_logits(self, mean_adj: SparseAdj, X: np.ndarray, beliefs: np.ndarray) -> Tensor:
        nb = mean_adj.matrix @ beliefs
        return self.p_out(self.p_hidden(ad.Tensor(np.hstack([X, nb]))))


@dataclass
class _IeCases:
    sets: list[np.ndarray]
    labels: list[np.ndarray]  # 1 failed, 0 normal, -1 unlabeled


def _ie_cases(view: ScopeView, sets: Sequence[np.ndarray], anchor_fraction: float) -> _IeCases:
    keep, labels = [], []
    for d in sets:
        if d.size == 0:
            continue
        near, _ = case_distances(view.graph, d)
        lab = np.full(view.size, -1, dtype=np.int8)
        lab[near >= anchor_fraction * near.max()] = 0
        lab[d] = 1
        keep.append(d)
        labels.append(lab)
    return _IeCases(keep, labels)


def _state_column(n: int, sets: Sequence[np.ndarray]) -> np.ndarray:
    X = np.ones((len(sets), n))
    for b, d in enumerate(sets):
        X[b, d] = 0.0
    return X.reshape(-1, 1)


def _balanced_weights(lab: np.ndarray, blocks: int) -> np.ndarray:
    """Per-row weights giving each class of labelled rows half the mass, per case."""
    lab = lab.reshape(blocks, -1)
    w = np.zeros(lab.shape)
    for b in range(blocks):
        pos, neg = lab[b] == 1, lab[b] == 0
        if pos.any():
            w[b, pos] = 0.5 / pos.sum()
        if neg.any():
            w[b, neg] = (0.5 if pos.any() else 1.0) / neg.sum()
    return w.reshape(-1) / blocks


def _cross_entropy(logits: Tensor, targets: np.ndarray, weights: np.ndarray) -> Tensor:
    """sum_i w_i * CE(target_i, softmax(logits_i)) for soft two-class targets."""
    return ad.scalar_mul(ad.reduce_sum(ad.mul(ad.log_row_softmax(logits), targets * weights[:, None])), -1.0)


def _one_hot(lab: np.ndarray) -> np.ndarray:
    out = np.zeros((lab.size, 2))
    out[lab == 0, 0] = 1.0
    out[lab == 1, 1] = 1.0
    return out


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def labeled_log_likelihood(model: IeModel, view: ScopeView, cases: _IeCases) -> float:
    """Class-balanced mean log-likelihood of q on the labelled rows."""
    B = len(cases.sets)
    X = _state_column(view.size, cases.sets)
    lab = np.concatenate(cases.labels)
    _, z = model.q_logits(view.block("sym", B), X)
    w = _balanced_weights(lab, B)
    return float(-_cross_entropy(z, _one_hot(lab), w).item())


def train_ie(g, dataset, em_rounds: int | None = None, cfg: IeConfig = IeConfig(), seed: int = 0) -> IeModel:
    """Train the inference networks by alternating E and M steps.

    Labelled rows per case are the initial failures (failed) and the nodes
    at least ``anchor_fraction`` of the maximum distance away (normal).
    """
    view, _ = _scope_graph(g)
    rounds = cfg.em_rounds if em_rounds is None else em_rounds
    sets = _initial_sets(dataset)
    cases = _ie_cases(view, sets, cfg.anchor_fraction)
    if not cases.sets:
        raise ConfigError("inference pre-training needs at least one case with initial failures")
    rng = substream(seed, "ie")
    model = IeModel.init(rng, cfg.dim)
    q_params = list(model.q_parameters().values())
    p_params = list(model.p_parameters().values())
    q_opt, p_opt = Adam(q_params, lr=cfg.lr), Adam(p_params, lr=cfg.lr)
    n = view.size
    batch = min(cfg.batch_cases, len(cases.sets))
    probe = _IeCases(cases.sets[: min(64, len(cases.sets))], cases.labels[: min(64, len(cases.labels))])

    def draw():
        idx = np.sort(rng.choice(len(cases.sets), size=batch, replace=False))
        ss = [cases.sets[i] for i in idx]
        return ss, _state_column(n, ss), np.concatenate([cases.labels[i] for i in idx])

    def q_step(p_targets: bool):
        ss, X, lab = draw()
        adj = view.block("sym", batch)
        w = _balanced_weights(lab, batch)
        T = _one_hot(lab)
        if p_targets:
            # beliefs from q, labelled rows fixed to their labels
            _, zq = model.q_logits(adj, X)
            beliefs = np.where((lab >= 0)[:, None], T, _softmax(zq.data))
            zp = model.p_logits(view.block("mean", batch), X, beliefs)
            soft = _softmax(zp.data)
            unl = lab < 0
            wu = np.where(unl, 1.0 / max(int(unl.sum()), 1), 0.0)
        q_opt.zero_grad()
        with Tape():
            _, z = model.q_logits(adj, X)
            loss = _cross_entropy(z, T, w)
            if p_targets:
                loss = ad.add(loss, _cross_entropy(z, soft, wu))
        ad.backward(loss)
        q_opt.step()

    def p_step():
        ss, X, lab = draw()
        adj = view.block("sym", batch)
        T = _one_hot(lab)
        _, zq = model.q_logits(adj, X)
        beliefs = np.where((lab >= 0)[:, None], T, _softmax(zq.data))
        w = np.full(lab.size, 1.0 / lab.size)
        p_opt.zero_grad()
        with Tape():
            zp = model.p_logits(view.block("mean", batch), X, beliefs)
            loss = _cross_entropy(zp, beliefs, w)
        ad.backward(loss)
        p_opt.step()

    for _ in range(cfg.steps):
        q_step(False)
    model.labeled_ll.append(labeled_log_likelihood(model, view, probe))
    for _ in range(rounds):
        for _ in range(cfg.steps):
            p_step()
        for _ in range(cfg.steps):
            q_step(True)
        model.labeled_ll.append(labeled_log_likelihood(model, view, probe))
    model.trained = True
    return model


def ie_embeddings(model: IeModel, g, sets, chunk: int = 64) -> list[np.ndarray]:
    """E_ie (last hidden layer of q) for each initial failed set, local ids."""
    if not model.trained:
        raise ValueError("inference model is not trained")
    view, _ = _scope_graph(g)
    sets = _initial_sets(sets)
    out = []
    for start in range(0, len(sets), chunk):
        part = sets[start : start + chunk]
        h = model.q_hidden(view.block("sym", len(part)), _state_column(view.size, part))
        out.extend(h.data.reshape(len(part), view.size, -1))
    return out


def failure_beliefs(model: IeModel, g, initial) -> np.ndarray:
    """q's per-node probability of the failed class for one case."""
    view, _ = _scope_graph(g)
    d = _initial_sets([initial])[0]
    _, z = model.q_logits(view.sym, _state_column(view.size, [d]))
    return _softmax(z.data)[:, 1]


# ----------------------------------------------------------- all scopes


@dataclass
class ScopeModels:
    """Everything needed to produce a scope's embeddings for any case."""

    view: ScopeView
    lp: np.ndarray
    gp: GpStack
    ie: IeModel

    def embeddings(self, initial_sets) -> list["EmbeddingSet"]:
        local = [self.view.to_local(d) for d in _initial_sets(initial_sets)]
        gp = gp_embeddings(self.gp, self.view, local)
        ie = ie_embeddings(self.ie, self.view, local)
        return [EmbeddingSet(self.view.name, self.lp, a, b) for a, b in zip(gp, ie)]

    def state(self) -> dict[str, np.ndarray]:
        p = f"emb.{self.view.name}"
        return {f"{p}.lp": self.lp, **self.gp.state(f"{p}.gp"), **self.ie.state(f"{p}.ie")}


@dataclass
class EmbeddingSet:
    scope: str
    lp: np.ndarray
    gp: np.ndarray
    ie: np.ndarray

    def __post_init__(self):
        n = self.lp.shape[0]
        if self.gp.shape[0] != n or self.ie.shape[0] != n:
            raise ValueError(f"embedding row counts differ for scope {self.scope}")


def run_all_pretraining(g: HeteroGraph, dataset, cfg: PretrainConfig = PretrainConfig(), seed: int = 0) -> dict[str, ScopeModels]:
    """Pre-train every scope: the coupled graph and each non-empty layer."""
    sets = _initial_sets(dataset)
    out = {}
    for k, (name, view) in enumerate(scope_views(g).items()):
        scope_seed = int(substream(seed, "pretrain", k).integers(2**62))
        n = view.size
        if 0 < view.graph.num_edges < n * (n - 1) // 2:
            lp, _ = train_lp(view.graph, cfg.lp, scope_seed)
        else:
            log.warning("scope %s is edgeless or complete; link-prediction embedding left at zero", name)
            lp = np.zeros((view.size, cfg.lp.dim))
        local = [view.to_local(d) for d in sets]
        if not any(d.size for d in local):
            log.warning("scope %s never holds an initial failure; using a single all-failed probe case", name)
            local = [np.arange(view.size)]
        gp = train_gp(view, local, cfg.gp, scope_seed)
        ie = train_ie(view, local, cfg=cfg.ie, seed=scope_seed)
        out[name] = ScopeModels(view, lp, gp, ie)
    return out


def pretrained_state(models: dict[str, ScopeModels]) -> dict[str, np.ndarray]:
    out = {}
    for m in models.values():
        out.update(m.state())
    return out


def load_pretrained(g: HeteroGraph, arrays: dict[str, np.ndarray]) -> dict[str, ScopeModels]:
    out = {}
    for name, view in scope_views(g).items():
        p = f"emb.{name}"
        if f"{p}.lp" not in arrays:
            raise KeyError(f"checkpoint has no embeddings for scope {name}")
        out[name] = ScopeModels(view, arrays[f"{p}.lp"], GpStack.from_state(arrays, f"{p}.gp"), IeModel.from_state(arrays, f"{p}.ie"))
    return out
