"""Scoring: node-level classification metrics, volume error and functional metrics."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .graph import HeteroGraph, LayerKind, RelationKind, components, connectivity, failed_set

TOP_TIER_POWER = 5.0
LOWER_TIER_POWER = 1.0


class MetricError(ValueError):
    """A metric is undefined for the given input."""


def prf1_counts(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    """Precision, recall, F1 from confusion counts.

    Empty denominators: precision is 0 when nothing is predicted but
    something should be, recall is 1 when there is nothing to recall, and
    both-empty scores (1, 1, 1).
    """
    if tp + fp + fn == 0:
        return 1.0, 1.0, 1.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def prf1(predicted: Iterable[int], truth: Iterable[int], universe_size: int | None = None) -> tuple[float, float, float]:
    p = set(int(x) for x in failed_set(predicted, universe_size))
    t = set(int(x) for x in failed_set(truth, universe_size))
    tp = len(p & t)
    return prf1_counts(tp, len(p) - tp, len(t) - tp)


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Rank-based ROC AUC (Mann-Whitney U) with tied scores sharing ranks."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape:
        raise MetricError(f"scores {s.shape} and labels {y.shape} differ in shape")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both classes present")
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def volume_rmse(pred_counts: Sequence[float], true_counts: Sequence[float]) -> float:
    p = np.asarray(pred_counts, dtype=np.float64)
    t = np.asarray(true_counts, dtype=np.float64)
    if p.size == 0 or p.shape != t.shape:
        raise MetricError("volume_rmse needs two equal-length, non-empty sequences")
    return float(np.sqrt(np.mean((p - t) ** 2)))


def anc(g: HeteroGraph, failed: Iterable[int]) -> float:
    """Pairwise connectivity left after removing ``failed``, relative to intact."""
    base = connectivity(g)
    if base == 0:
        raise MetricError("ANC undefined: the intact graph has no connected pairs")
    return connectivity(g, failed) / base


def aoi_yield(g: HeteroGraph, failed_stations: Iterable[int]) -> float:
    """Share of AOIs still served: an AOI is lost only when more than half of its
    communication suppliers failed."""
    aoi = g.layer_nodes[LayerKind.AOI]
    if aoi.size == 0:
        raise MetricError("graph has no AOI nodes")
    adj = g.relation_adjacency(RelationKind.COM_AOI)[aoi]
    supply = np.diff(adj.indptr)
    if np.any(supply == 0):
        bad = aoi[supply == 0][:5].tolist()
        raise MetricError(f"AOI nodes without communication suppliers: {bad}")
    down = np.zeros(g.num_nodes)
    down[failed_set(failed_stations, g.num_nodes)] = 1.0
    lost = adj @ down
    return float(np.mean(~(2 * lost > supply)))


def node_power(g: HeteroGraph) -> np.ndarray:
    """Nominal power per electric node (tier-weighted), zero elsewhere."""
    w = np.zeros(g.num_nodes)
    elec = g.layer_nodes[LayerKind.ELECTRIC]
    w[elec] = np.where(g.tiers[elec] == 0, TOP_TIER_POWER, LOWER_TIER_POWER)
    return w


def total_power(g: HeteroGraph, failed: Iterable[int]) -> float:
    """Nominal power of surviving electric nodes still linked to a surviving
    top-tier node through surviving electric lines."""
    elec, _ = g.layer_subgraph(LayerKind.ELECTRIC)
    ids = g.layer_nodes[LayerKind.ELECTRIC]
    local = np.full(g.num_nodes, -1)
    local[ids] = np.arange(ids.size)
    f = failed_set(failed, g.num_nodes)
    gone = local[f]
    gone = gone[gone >= 0]
    power = node_power(g)[ids]
    total = 0.0
    for comp in components(elec, gone):
        comp = np.asarray(comp)
        if np.any(elec.tiers[comp] == 0):
            total += float(power[comp].sum())
    return total


# ------------------------------------------------------------------ heat map


def heatmap_export(truth, predicted) -> list[tuple[int, int, int, int]]:
    """Rows (case_id, |D|, |D'| true, |D'| predicted) aligned on case id."""
    pred = {r.case_id: r for r in predicted}
    rows = []
    for t in truth:
        if t.case_id not in pred:
            raise MetricError(f"no prediction for case {t.case_id}")
        rows.append((t.case_id, len(t.initial_failed), len(t.final_failed), len(pred[t.case_id].final_failed)))
    if len(pred) != len(rows):
        extra = sorted(set(pred) - {r[0] for r in rows})[:5]
        raise MetricError(f"predictions for unknown cases {extra}")
    return rows


def heatmap_bins(rows, column: int, edges: Sequence[float]) -> np.ndarray:
    """Counts indexed by [|D|, volume bin] for column 2 (truth) or 3 (prediction)."""
    rows = list(rows)
    max_d = max((r[1] for r in rows), default=0)
    out = np.zeros((max_d + 1, len(edges) - 1), dtype=np.int64)
    for r in rows:
        b = np.searchsorted(edges, r[column], side="right") - 1
        if 0 <= b < out.shape[1]:
            out[r[1], b] += 1
    return out


# ------------------------------------------------------------------ reports


@dataclass
class MetricsReport:
    auc: float | None
    precision: float
    recall: float
    f1: float
    volume_rmse: float
    cases: int
    per_layer: dict[str, dict] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, meta: dict | None = None) -> str:
        doc = self.to_dict()
        if meta is not None:
            doc["meta"] = meta
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def _scores(scores, labels, pred):
    tp = int(np.sum(pred & labels))
    fp = int(np.sum(pred & ~labels))
    fn = int(np.sum(~pred & labels))
    p, r, f = prf1_counts(tp, fp, fn)
    try:
        a = auc(scores, labels)
    except MetricError:
        a = None
    return a, p, r, f


def evaluate_cases(g: HeteroGraph, records, probs: Sequence[np.ndarray], threshold: float = 0.5) -> MetricsReport:
    """Pooled node-level scores over all (case, node) pairs outside D.

    ``probs[k]`` holds per-node failure scores for ``records[k]``; nodes in D
    are excluded since they are failed by assumption.
    """
    records = list(records)
    if len(records) != len(probs):
        raise MetricError("records and probability vectors differ in number")
    if not records:
        raise MetricError("no cases to evaluate")
    n = g.num_nodes
    layer_of = g.layers
    sc, lab, prd, lay = [], [], [], []
    pred_counts, true_counts = [], []
    for rec, p in zip(records, probs):
        p = np.asarray(p, dtype=np.float64)
        d = np.zeros(n, dtype=bool)
        d[list(rec.initial_failed)] = True
        y = np.zeros(n, dtype=bool)
        y[list(rec.final_failed)] = True
        hit = (p >= threshold) | d
        keep = ~d
        sc.append(p[keep])
        lab.append(y[keep])
        prd.append(hit[keep])
        lay.append(layer_of[keep])
        pred_counts.append(int(hit.sum()))
        true_counts.append(int(y.sum()))
    sc, lab, prd, lay = map(np.concatenate, (sc, lab, prd, lay))
    a, p, r, f = _scores(sc, lab, prd)
    per_layer = {}
    for layer in LayerKind:
        m = lay == layer
        if m.any():
            la, lp, lr, lf = _scores(sc[m], lab[m], prd[m])
            per_layer[layer.label] = {"auc": la, "precision": lp, "recall": lr, "f1": lf}
    return MetricsReport(
        auc=a,
        precision=p,
        recall=r,
        f1=f,
        volume_rmse=volume_rmse(pred_counts, true_counts),
        cases=len(records),
        per_layer=per_layer,
    )
