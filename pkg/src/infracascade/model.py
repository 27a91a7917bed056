"""Cascade predictor: dual encoders over pre-trained embeddings, per-layer
fusion, relational propagation, dual decoders and a relational output head.

Cases share one topology, so a batch stacks the node rows of several cases
and every graph operator is repeated block-diagonally.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .autodiff import Adam, ContractError, SparseAdj, Tape, Tensor
from .cascade import CascadeRecord, substream
from .graph import HeteroGraph, LayerKind, RelationKind, failed_set
from .layers import Dense, GcnLayer, RgcnLayer, gcn_forward, relation_adjs, rgcn_forward
from .netgen import ConfigError
from .pretrain import ScopeModels, _initial_sets, gp_embeddings, ie_embeddings

log = logging.getLogger(__name__)

ABLATIONS = ("no_lp", "no_gp", "no_ie", "no_rgcn")
LAYER_SCOPES = tuple(k.label for k in LayerKind)


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 64
    dec_hidden: int = 32
    epochs: int = 20
    batch_cases: int = 8
    lr: float = 5e-3
    threshold: float = 0.5
    ablation: str | None = None

    def __post_init__(self):
        if self.ablation is not None and self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}; choose from {', '.join(ABLATIONS)}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError("threshold must lie in [0, 1]")
        if self.epochs < 0 or self.batch_cases < 1:
            raise ConfigError("epochs must be >= 0 and batch_cases >= 1")

    def parts(self) -> tuple[str, ...]:
        """Which pre-trained embeddings feed the encoders."""
        return tuple(p for p in ("lp", "gp", "ie") if self.ablation != f"no_{p}")

    def to_dict(self) -> dict:
        return asdict(self)


# -------------------------------------------------------------- inputs


@dataclass
class _Scaler:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray) -> "_Scaler":
        std = X.std(axis=0)
        std[std < 1e-12] = 1.0
        return cls(X.mean(axis=0), std)

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) / self.std


class CaseInputs:
    """Encoder inputs per scope: Concat(E_lp, E_gp, E_ie), standardised.

    E_gp is computed once per case and cached; E_ie is cheap and is
    recomputed per batch. Scalers are fitted on the cases given at
    construction (the training split).
    """

    def __init__(self, pretrained: dict[str, ScopeModels], fit_sets, parts: Sequence[str] = ("lp", "gp", "ie")):
        self.models = pretrained
        self.parts = tuple(parts)
        if not self.parts:
            raise ConfigError("at least one embedding family must stay enabled")
        self._gp: dict[tuple[int, ...], dict[str, np.ndarray]] = {}
        sample = _initial_sets(fit_sets)[:64]
        self.scalers: dict[str, dict[str, _Scaler]] = {}
        raw = self._raw(sample)
        for scope, m in pretrained.items():
            self.scalers[scope] = {"lp": _Scaler.fit(m.lp)}
            for part in ("gp", "ie"):
                self.scalers[scope][part] = _Scaler.fit(np.vstack([r[scope][part] for r in raw]))

    def width(self, scope: str) -> int:
        m = self.models[scope]
        w = {"lp": m.lp.shape[1], "gp": m.gp.depth - 1, "ie": m.ie.q2.d_out}
        return sum(w[p] for p in self.parts)

    def _gp_for(self, sets: list[np.ndarray]) -> list[dict[str, np.ndarray]]:
        missing = [d for d in sets if tuple(d.tolist()) not in self._gp]
        if missing:
            uniq = list({tuple(d.tolist()): d for d in missing}.values())
            per_scope = {}
            for scope, m in self.models.items():
                local = [m.view.to_local(d) for d in uniq]
                per_scope[scope] = gp_embeddings(m.gp, m.view, local)
            for k, d in enumerate(uniq):
                self._gp[tuple(d.tolist())] = {s: per_scope[s][k] for s in self.models}
        return [self._gp[tuple(d.tolist())] for d in sets]

    def _raw(self, sets: list[np.ndarray]) -> list[dict[str, dict[str, np.ndarray]]]:
        gp = self._gp_for(sets)
        out = [dict() for _ in sets]
        for scope, m in self.models.items():
            local = [m.view.to_local(d) for d in sets]
            ie = ie_embeddings(m.ie, m.view, local)
            for k in range(len(sets)):
                out[k][scope] = {"gp": gp[k][scope], "ie": ie[k]}
        return out

    def batch(self, sets) -> dict[str, np.ndarray]:
        """Stacked (cases x scope nodes, width) input per scope."""
        sets = _initial_sets(sets)
        raw = self._raw(sets)
        out = {}
        for scope, m in self.models.items():
            sc = self.scalers[scope]
            lp = sc["lp"](m.lp)
            rows = []
            for r in raw:
                cols = []
                for p in self.parts:
                    cols.append(lp if p == "lp" else sc[p](r[scope][p]))
                rows.append(np.hstack(cols))
            out[scope] = np.vstack(rows)
        return out


# ----------------------------------------------------------- graph context


class GraphContext:
    """Block-diagonal operators for batches of ``blocks`` cases."""

    def __init__(self, g: HeteroGraph, pretrained: dict[str, ScopeModels]):
        self.g = g
        self.views = {s: m.view for s, m in pretrained.items()}
        self.rel = relation_adjs(g)
        self.sym = SparseAdj(g.adjacency(), mode="sym")
        self.layer_ids = [self.views[s].ids for s in LAYER_SCOPES if s in self.views]
        order = np.concatenate(self.layer_ids)
        if not np.array_equal(np.sort(order), np.arange(g.num_nodes)):
            raise ContractError("layer scopes do not partition the node set")
        self._cache: dict = {}

    def _get(self, key, make):
        if key not in self._cache:
            self._cache[key] = make()
        return self._cache[key]

    def rel_blocks(self, blocks: int) -> dict[RelationKind, SparseAdj]:
        return self._get(("rel", blocks), lambda: {r: a.block_diag(blocks) for r, a in self.rel.items()})

    def sym_blocks(self, blocks: int) -> SparseAdj:
        return self._get(("sym", blocks), lambda: self.sym.block_diag(blocks))

    def scope_sym(self, scope: str, blocks: int) -> SparseAdj:
        return self.views[scope].block("sym", blocks)

    def fuse_index(self, blocks: int) -> np.ndarray:
        """Row index turning layer-major stacked rows into case-major node rows."""

        def make():
            n = self.g.num_nodes
            pos = np.empty((blocks, n), dtype=np.int64)
            offset = 0
            for ids in self.layer_ids:
                k = ids.size
                pos[:, ids] = offset + np.arange(blocks)[:, None] * k + np.arange(k)[None, :]
                offset += blocks * k
            return pos.reshape(-1)

        return self._get(("fuse", blocks), make)


# ---------------------------------------------------------------- params


@dataclass
class I3Params:
    coupled_enc: list[GcnLayer]
    single_enc: dict[str, list[GcnLayer]]
    prop: list
    dec_cp: Dense
    dec_sg: Dense
    out: object
    ablation: str | None = None

    @classmethod
    def init(cls, rng: np.random.Generator, widths: dict[str, int], cfg: ModelConfig) -> "I3Params":
        h = cfg.hidden
        coupled = [GcnLayer.init(rng, widths["coupled"], h), GcnLayer.init(rng, h, h)]
        single = {s: [GcnLayer.init(rng, widths[s], h), GcnLayer.init(rng, h, h)] for s in LAYER_SCOPES if s in widths}
        if cfg.ablation == "no_rgcn":
            prop = [GcnLayer.init(rng, 2 * h, h), GcnLayer.init(rng, h, h)]
            out = GcnLayer.init(rng, 2 * cfg.dec_hidden, 1, "identity")
        else:
            prop = [RgcnLayer.init(rng, 2 * h, h, bias=True), RgcnLayer.init(rng, h, h, bias=True)]
            out = RgcnLayer.init(rng, 2 * cfg.dec_hidden, 1, activation="identity", bias=True)
        return cls(
            coupled,
            single,
            prop,
            Dense.init(rng, h, cfg.dec_hidden, "relu"),
            Dense.init(rng, h, cfg.dec_hidden, "relu"),
            out,
            cfg.ablation,
        )

    @property
    def relational(self) -> bool:
        return self.ablation != "no_rgcn"

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.coupled_enc):
            out.update(layer.parameters(f"i3.enc.coupled.{i}"))
        for s, layers in sorted(self.single_enc.items()):
            for i, layer in enumerate(layers):
                out.update(layer.parameters(f"i3.enc.{s}.{i}"))
        for i, layer in enumerate(self.prop):
            out.update(layer.parameters(f"i3.prop.{i}"))
        out.update(self.dec_cp.parameters("i3.dec.coupled"))
        out.update(self.dec_sg.parameters("i3.dec.single"))
        out.update(self.out.parameters("i3.out"))
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = sorted(set(params) - set(arrays))
        if missing:
            raise ContractError(f"checkpoint lacks parameters {missing[:5]}")
        for k, t in params.items():
            if arrays[k].shape != t.shape:
                raise ContractError(f"parameter {k}: checkpoint shape {arrays[k].shape} != {t.shape}")
            t.data = np.array(arrays[k], dtype=np.float64)


# ---------------------------------------------------------------- forward


def encode(params: I3Params, ctx: GraphContext, inputs: dict[str, np.ndarray], blocks: int = 1):
    """Coupled embedding over the whole graph and one embedding per layer scope."""
    X = inputs["coupled"]
    if X.shape[1] != params.coupled_enc[0].d_in:
        raise ContractError(f"coupled input width {X.shape[1]} != encoder width {params.coupled_enc[0].d_in}")
    h = ad.Tensor(X)
    for layer in params.coupled_enc:
        h = gcn_forward(layer, ctx.sym_blocks(blocks), h)
    single = {}
    for s, layers in params.single_enc.items():
        z = ad.Tensor(inputs[s])
        for layer in layers:
            z = gcn_forward(layer, ctx.scope_sym(s, blocks), z)
        single[s] = z
    return h, single


def fuse(E_cp: Tensor, E_sg: dict[str, Tensor], ctx: GraphContext, blocks: int = 1) -> Tensor:
    """Row n = Concat(coupled row n, row n of the embedding of n's own layer)."""
    parts = [E_sg[s] for s in LAYER_SCOPES if s in E_sg]
    if len(parts) != len(ctx.layer_ids):
        raise ContractError("a layer scope embedding is missing")
    aligned = ad.index_rows(ad.concat_rows(parts), ctx.fuse_index(blocks))
    return ad.concat_cols([E_cp, aligned])


def propagate_and_decode(params: I3Params, E: Tensor, ctx: GraphContext, blocks: int = 1) -> Tensor:
    """Per-node failure logits (apply a sigmoid for probabilities)."""
    h = E
    for layer in params.prop:
        h = rgcn_forward(layer, ctx.rel_blocks(blocks), h) if params.relational else gcn_forward(layer, ctx.sym_blocks(blocks), h)
    dec = ad.concat_cols([params.dec_cp(h), params.dec_sg(h)])
    if params.relational:
        return rgcn_forward(params.out, ctx.rel_blocks(blocks), dec)
    return gcn_forward(params.out, ctx.sym_blocks(blocks), dec)


def forward_logits(params: I3Params, ctx: GraphContext, inputs: dict[str, np.ndarray], blocks: int) -> Tensor:
    E_cp, E_sg = encode(params, ctx, inputs, blocks)
    return propagate_and_decode(params, fuse(E_cp, E_sg, ctx, blocks), ctx, blocks)


# ------------------------------------------------------------------ loss


def _case_weights(labels: np.ndarray, initial: np.ndarray) -> np.ndarray:
    """Row weights: positives scaled by #neg/#pos, normalised per case; D rows 0."""
    w = np.zeros(labels.shape)
    for b in range(labels.shape[0]):
        free = ~initial[b]
        pos = free & labels[b]
        neg = free & ~labels[b]
        n_pos, n_neg = int(pos.sum()), int(neg.sum())
        if n_pos and n_neg:
            w[b, pos] = n_neg / n_pos
            w[b, neg] = 1.0
            w[b] /= 2.0 * n_neg
        elif n_pos or n_neg:
            w[b, free] = 1.0 / (n_pos + n_neg)
    return w


def cascade_loss(logits: Tensor, labels: np.ndarray, initial: np.ndarray) -> Tensor:
    """Class-weighted binary cross-entropy averaged over cases.

    ``labels`` and ``initial`` are boolean (cases, nodes) arrays; initial
    failures are clamped to probability 1 and so add nothing.
    """
    w = _case_weights(labels, initial) / labels.shape[0]
    y = labels.reshape(-1, 1).astype(np.float64)
    w = w.reshape(-1, 1)
    pos = ad.mul(ad.softplus(ad.scalar_mul(logits, -1.0)), w * y)
    neg = ad.mul(ad.softplus(logits), w * (1.0 - y))
    return ad.reduce_sum(ad.add(pos, neg))


def weighted_bce(probs: np.ndarray, labels: np.ndarray, initial: np.ndarray, eps: float = 1e-15) -> float:
    """The training loss evaluated on probabilities, for (cases, nodes) arrays."""
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    labels = np.atleast_2d(np.asarray(labels, dtype=bool))
    initial = np.atleast_2d(np.asarray(initial, dtype=bool))
    w = _case_weights(labels, initial) / labels.shape[0]
    p = np.clip(probs, eps, 1.0 - eps)
    return float(np.sum(w * np.where(labels, -np.log(p), -np.log(1.0 - p))))


def _masks(records: Sequence[CascadeRecord], n: int) -> tuple[np.ndarray, np.ndarray]:
    lab = np.zeros((len(records), n), dtype=bool)
    ini = np.zeros((len(records), n), dtype=bool)
    for b, r in enumerate(records):
        lab[b, list(r.final_failed)] = True
        ini[b, list(r.initial_failed)] = True
    return lab, ini


# ------------------------------------------------------------ train / infer


@dataclass
class TrainedModel:
    params: I3Params
    inputs: CaseInputs
    ctx: GraphContext
    cfg: ModelConfig
    curve: list[float] = field(default_factory=list)
    val_curve: list[float] = field(default_factory=list)
    best_epoch: int = 0

    def probabilities(self, sets, chunk: int | None = None) -> list[np.ndarray]:
        """Per-node failure probabilities with initial failures clamped to 1."""
        sets = _initial_sets(sets)
        chunk = chunk or self.cfg.batch_cases
        n = self.ctx.g.num_nodes
        out = []
        for start in range(0, len(sets), chunk):
            part = sets[start : start + chunk]
            z = forward_logits(self.params, self.ctx, self.inputs.batch(part), len(part))
            p = expit(z.data.reshape(len(part), n))
            for k, d in enumerate(part):
                q = p[k].copy()
                q[d] = 1.0
                out.append(q)
        return out

    def loss(self, records: Sequence[CascadeRecord]) -> float:
        if not records:
            return float("nan")
        lab, ini = _masks(records, self.ctx.g.num_nodes)
        probs = np.vstack(self.probabilities(records))
        return weighted_bce(probs, lab, ini)


def _mean_loss(model: TrainedModel, records, chunk: int) -> float:
    total = 0.0
    for start in range(0, len(records), chunk):
        part = records[start : start + chunk]
        total += model.loss(part) * len(part)
    return total / len(records)


def train(
    g: HeteroGraph,
    pretrained: dict[str, ScopeModels],
    train_records: Sequence[CascadeRecord],
    cfg: ModelConfig = ModelConfig(),
    seed: int = 0,
    val_records: Sequence[CascadeRecord] = (),
) -> TrainedModel:
    """Fit the predictor with Adam on the class-weighted cross-entropy.

    When validation records are given the parameters of the epoch with
    the lowest validation loss are kept.
    """
    train_records = list(train_records)
    if not train_records:
        raise ConfigError("training split is empty")
    inputs = CaseInputs(pretrained, train_records, cfg.parts())
    ctx = GraphContext(g, pretrained)
    rng = substream(seed, "train")
    params = I3Params.init(rng, {s: inputs.width(s) for s in pretrained}, cfg)
    model = TrainedModel(params, inputs, ctx, cfg)
    opt = Adam(list(params.parameters().values()), lr=cfg.lr)
    n = g.num_nodes
    B = cfg.batch_cases
    model.curve.append(_mean_loss(model, train_records, B))
    best = (np.inf, params.state(), 0)
    if val_records:
        v = _mean_loss(model, list(val_records), B)
        model.val_curve.append(v)
        best = (v, params.state(), 0)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_records))
        total = 0.0
        for start in range(0, len(order), B):
            part = [train_records[i] for i in order[start : start + B]]
            lab, ini = _masks(part, n)
            X = inputs.batch(part)
            opt.zero_grad()
            with Tape():
                loss = cascade_loss(forward_logits(params, ctx, X, len(part)), lab, ini)
            ad.backward(loss)
            opt.step()
            total += loss.item() * len(part)
        model.curve.append(total / len(train_records))
        if val_records:
            v = _mean_loss(model, list(val_records), B)
            model.val_curve.append(v)
            if v < best[0]:
                best = (v, params.state(), epoch)
    if val_records:
        params.load_state(best[1])
        model.best_epoch = best[2]
    else:
        model.best_epoch = cfg.epochs
    return model


@dataclass
class Prediction:
    case_id: int
    probabilities: np.ndarray
    failed: np.ndarray


def infer_cascade(model: TrainedModel, initial, threshold: float | None = None, case_id: int = 0) -> Prediction:
    threshold = model.cfg.threshold if threshold is None else threshold
    if not 0.0 <= threshold <= 1.0:
        raise ContractError(f"threshold {threshold} outside [0, 1]")
    d = failed_set(initial, model.ctx.g.num_nodes)
    p = model.probabilities([d])[0]
    hit = np.union1d(np.flatnonzero(p >= threshold), d)
    return Prediction(case_id, p, hit)


def predict_records(model: TrainedModel, records, threshold: float | None = None) -> tuple[list[np.ndarray], list[CascadeRecord]]:
    """Probabilities and thresholded prediction records for each input record."""
    threshold = model.cfg.threshold if threshold is None else threshold
    if not 0.0 <= threshold <= 1.0:
        raise ContractError(f"threshold {threshold} outside [0, 1]")
    records = list(records)
    probs = model.probabilities(records)
    out = []
    for r, p in zip(records, probs):
        hit = np.union1d(np.flatnonzero(p >= threshold), np.asarray(r.initial_failed, dtype=np.int64))
        out.append(CascadeRecord(r.case_id, r.initial_failed, tuple(int(x) for x in hit), r.seed, "i3"))
    return probs, out


def restore(
    g: HeteroGraph,
    pretrained: dict[str, ScopeModels],
    train_records: Sequence[CascadeRecord],
    cfg: ModelConfig,
    arrays: dict[str, np.ndarray],
) -> TrainedModel:
    """Rebuild a trained model from checkpoint arrays.

    Input scalers are refitted on the training records, which reproduces
    them exactly.
    """
    inputs = CaseInputs(pretrained, list(train_records), cfg.parts())
    ctx = GraphContext(g, pretrained)
    params = I3Params.init(np.random.default_rng(0), {s: inputs.width(s) for s in pretrained}, cfg)
    params.load_state(arrays)
    return TrainedModel(params, inputs, ctx, cfg)
