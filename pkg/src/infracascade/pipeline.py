"""Experiment stages with on-disk artifacts.

Every stage reads its inputs from the run directory, writes its outputs
there, and stamps each file with the config hash and seed. Stages are pure
functions of (config, seed, upstream files), so re-running one yields the
same bytes.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import load_checkpoint, save_checkpoint
from .cascade import (
    CascadeRecord,
    build_dataset,
    dependency_cascade,
    icm_frequency,
    phase_sweep,
    read_records,
    substream,
    sweep_seed_sets,
    transition_index,
    write_records,
)
from .config import ExperimentConfig, kfold, split
from .graph import HeteroGraph, LayerKind, dump_graph, load_graph
from .metrics import MetricsReport, anc, aoi_yield, evaluate_cases, heatmap_export, total_power
from .model import TrainedModel, predict_records, restore, train
from .netgen import generate
from .pretrain import load_pretrained, pretrained_state, run_all_pretraining

log = logging.getLogger(__name__)

ARTIFACTS = {
    "graph": ("graph.json", "netgen"),
    "dataset": ("dataset.jsonl", "simulate"),
    "split": ("split.json", "simulate"),
    "embeddings": ("embeddings.json", "pretrain"),
    "model": ("model.json", "train"),
    "predictions": ("predictions.jsonl", "predict"),
    "metrics": ("metrics.json", "evaluate"),
}


class MissingArtifact(FileNotFoundError):
    pass


def artifact(cfg: ExperimentConfig, name: str, suffix: str = "") -> Path:
    fname, _ = ARTIFACTS[name]
    if suffix:
        stem, ext = fname.rsplit(".", 1)
        fname = f"{stem}_{suffix}.{ext}"
    return cfg.out_dir / fname


def require(cfg: ExperimentConfig, name: str, suffix: str = "") -> Path:
    path = artifact(cfg, name, suffix)
    if not path.exists():
        producer = ARTIFACTS[name][1]
        raise MissingArtifact(f"{path} not found; run the '{producer}' command first")
    return path


def _csv_text(header: list[str], rows, meta: dict) -> str:
    buf = io.StringIO()
    buf.write(f"# config_hash={meta['config_hash']} seed={meta['seed']}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(x) if isinstance(x, float) else x for x in r])
    return buf.getvalue()


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


# -------------------------------------------------------------- loaders


def load_graph_file(cfg: ExperimentConfig) -> HeteroGraph:
    return load_graph(require(cfg, "graph").read_bytes())


def load_dataset(cfg: ExperimentConfig) -> list[CascadeRecord]:
    with open(require(cfg, "dataset"), encoding="utf-8") as fh:
        return read_records(fh)


@dataclass
class Splits:
    train: list[CascadeRecord]
    val: list[CascadeRecord]
    test: list[CascadeRecord]
    folds: list[int]


def load_splits(cfg: ExperimentConfig, records: list[CascadeRecord]) -> Splits:
    doc = json.loads(require(cfg, "split").read_text(encoding="utf-8"))
    by_id = {r.case_id: r for r in records}
    try:
        parts = [[by_id[i] for i in doc[k]] for k in ("train", "val", "test")]
    except KeyError as exc:
        raise MissingArtifact(f"split refers to unknown case {exc}; re-run 'simulate'") from None
    return Splits(*parts, doc["folds"])


def load_pretrained_file(cfg: ExperimentConfig, g: HeteroGraph):
    return load_pretrained(g, load_checkpoint(require(cfg, "embeddings")))


def load_model(cfg: ExperimentConfig, g: HeteroGraph, splits: Splits) -> TrainedModel:
    pre = load_pretrained_file(cfg, g)
    arrays = load_checkpoint(require(cfg, "model"))
    return restore(g, pre, splits.train, cfg.model, arrays)


# --------------------------------------------------------------- stages


def run_netgen(cfg: ExperimentConfig) -> HeteroGraph:
    gen_seed = int(substream(cfg.seed, "netgen").integers(2**62))
    g = generate(cfg.netgen.gen_config(gen_seed))
    path = artifact(cfg, "graph")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dump_graph(g, cfg.meta()))
    return g


def candidates(g: HeteroGraph, layer: str | None):
    return None if layer is None else g.layer_nodes[LayerKind.parse(layer)]


def run_simulate(cfg: ExperimentConfig) -> list[CascadeRecord]:
    g = load_graph_file(cfg)
    ds = cfg.dataset
    records = build_dataset(g, ds.count_per_size, ds.sizes(), cfg.cascade, cfg.seed, candidates(g, ds.layer))
    buf = io.StringIO()
    write_records(records, buf, cfg.meta())
    _write(artifact(cfg, "dataset"), buf.getvalue())
    tr, va, te = split(records, cfg.fractions, cfg.seed)
    folds = kfold(records, cfg.k_folds, cfg.seed)
    doc = {
        "meta": cfg.meta(),
        "train": [r.case_id for r in tr],
        "val": [r.case_id for r in va],
        "test": [r.case_id for r in te],
        "folds": [int(f) for f in folds],
    }
    _write(artifact(cfg, "split"), json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n")
    return records


def run_pretrain(cfg: ExperimentConfig):
    g = load_graph_file(cfg)
    splits = load_splits(cfg, load_dataset(cfg))
    pre = run_all_pretraining(g, splits.train, cfg.pretrain, int(substream(cfg.seed, "pretrain").integers(2**62)))
    save_checkpoint(artifact(cfg, "embeddings"), pretrained_state(pre), cfg.meta())
    return pre


def run_train(cfg: ExperimentConfig) -> TrainedModel:
    g = load_graph_file(cfg)
    splits = load_splits(cfg, load_dataset(cfg))
    pre = load_pretrained_file(cfg, g)
    seed = int(substream(cfg.seed, "train").integers(2**62))
    model = train(g, pre, splits.train, cfg.model, seed, splits.val)
    save_checkpoint(artifact(cfg, "model"), model.params.state(), cfg.meta())
    rows = [(e, float(l), float(model.val_curve[e]) if e < len(model.val_curve) else "") for e, l in enumerate(model.curve)]
    _write(cfg.out_dir / "train_curve.csv", _csv_text(["epoch", "train_loss", "val_loss"], rows, cfg.meta()))
    return model


def _prediction_lines(records, probs, cfg: ExperimentConfig) -> str:
    buf = io.StringIO()
    buf.write(json.dumps({"meta": cfg.meta()}, sort_keys=True, separators=(",", ":")) + "\n")
    for r, p in zip(records, probs):
        doc = json.loads(r.to_json())
        hot = np.flatnonzero(p > 0.01)
        doc["probabilities"] = {str(int(i)): float(p[i]) for i in hot}
        buf.write(json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n")
    return buf.getvalue()


def run_predict(cfg: ExperimentConfig):
    g = load_graph_file(cfg)
    splits = load_splits(cfg, load_dataset(cfg))
    model = load_model(cfg, g, splits)
    probs, preds = predict_records(model, splits.test, cfg.model.threshold)
    _write(artifact(cfg, "predictions"), _prediction_lines(preds, probs, cfg))
    return probs, preds


def read_predictions(cfg: ExperimentConfig, n: int) -> tuple[list[CascadeRecord], list[np.ndarray]]:
    recs, probs = [], []
    with open(require(cfg, "predictions"), encoding="utf-8") as fh:
        for line in fh:
            doc = json.loads(line)
            if "meta" in doc:
                continue
            p = np.zeros(n)
            for k, v in doc.pop("probabilities").items():
                p[int(k)] = v
            p[doc["initial_failed"]] = 1.0
            recs.append(CascadeRecord.from_json(json.dumps(doc)))
            probs.append(p)
    return recs, probs


def icm_scores(cfg: ExperimentConfig, g: HeteroGraph, records, prob: float) -> list[np.ndarray]:
    out = []
    for r in records:
        s = int(substream(cfg.seed, "icm-case", r.case_id).integers(2**62))
        out.append(icm_frequency(g, r.initial_failed, prob, cfg.icm.runs, s))
    return out


def fit_icm(cfg: ExperimentConfig, g: HeteroGraph, val) -> float:
    """Activation probability with the best validation AUC (first on ties)."""
    best_p, best_auc = cfg.icm.probabilities[0], -1.0
    for p in cfg.icm.probabilities:
        a = evaluate_cases(g, val, icm_scores(cfg, g, val, p)).auc
        if a is not None and a > best_auc:
            best_p, best_auc = p, a
    return best_p


def functional_rows(g: HeteroGraph, truth, predicted) -> list[dict]:
    """Per-|D| means of road ANC, AOI yield and electric power, true vs predicted."""
    road, road_ids = g.layer_subgraph(LayerKind.ROAD)
    local = np.full(g.num_nodes, -1)
    local[road_ids] = np.arange(road_ids.size)
    com = set(g.layer_nodes[LayerKind.COM].tolist())

    def measures(failed):
        f = np.asarray(failed, dtype=np.int64)
        r = local[f]
        out = {"anc": anc(road, r[r >= 0]) if road.num_edges else 1.0}
        out["yield"] = aoi_yield(g, [x for x in f.tolist() if x in com])
        out["power"] = total_power(g, f)
        return out

    acc: dict[int, list] = {}
    for t, p in zip(truth, predicted):
        mt, mp = measures(t.final_failed), measures(p.final_failed)
        acc.setdefault(len(t.initial_failed), []).append((mt, mp))
    rows = []
    for size, items in sorted(acc.items()):
        row = {"initial": size}
        for key in ("anc", "yield", "power"):
            row[f"{key}_true"] = float(np.mean([a[key] for a, _ in items]))
            row[f"{key}_pred"] = float(np.mean([b[key] for _, b in items]))
        rows.append(row)
    return rows


def run_evaluate(cfg: ExperimentConfig, baseline: str | None = None) -> MetricsReport:
    g = load_graph_file(cfg)
    splits = load_splits(cfg, load_dataset(cfg))
    if baseline is None:
        preds, probs = read_predictions(cfg, g.num_nodes)
        by_id = {r.case_id: r for r in splits.test}
        truth = [by_id[r.case_id] for r in preds]
        report = evaluate_cases(g, truth, probs, cfg.model.threshold)
        report.extra["functional"] = functional_rows(g, truth, preds)
        report.extra["model"] = "i3" if cfg.model.ablation is None else f"i3-{cfg.model.ablation}"
        path = artifact(cfg, "metrics")
    elif baseline == "icm":
        p = fit_icm(cfg, g, splits.val)
        probs = icm_scores(cfg, g, splits.test, p)
        report = evaluate_cases(g, splits.test, probs, cfg.model.threshold)
        report.extra["model"] = "icm"
        report.extra["icm_probability"] = p
        path = artifact(cfg, "metrics", "icm")
    else:
        raise ValueError(f"unknown baseline {baseline!r}")
    _write(path, report.to_json(cfg.meta()))
    return report


@dataclass
class SweepOutput:
    sizes: np.ndarray
    truth: np.ndarray
    truth_std: np.ndarray
    predicted: np.ndarray | None
    truth_index: int
    predicted_index: int | None


def predicted_sweep(model: TrainedModel, sets: list[list[np.ndarray]], threshold: float) -> np.ndarray:
    """Mean predicted failed fraction per seed size over the sweep's seed sets."""
    n = model.ctx.g.num_nodes
    reps, sizes = len(sets), len(sets[0])
    flat = [d for row in sets for d in row]
    probs = model.probabilities(flat)
    vol = np.array([np.count_nonzero((p >= threshold)) for p in probs], dtype=np.float64) / n
    return vol.reshape(reps, sizes).mean(axis=0)


def sweep(cfg: ExperimentConfig, g: HeteroGraph, model: TrainedModel | None, layer: str | None) -> SweepOutput:
    sw = cfg.sweep
    cand = candidates(g, layer)
    seed = int(substream(cfg.seed, "sweep").integers(2**62))
    truth = phase_sweep(g, cfg.cascade, sw.max_seed_size, sw.reps, seed, cand)
    pred = pidx = None
    if model is not None:
        sets = sweep_seed_sets(g.num_nodes, sw.max_seed_size, sw.reps, seed, cand)
        pred = predicted_sweep(model, sets, cfg.model.threshold)
        pidx = transition_index(pred)
    return SweepOutput(truth.sizes, truth.fraction, truth.std, pred, truth.transition_index, pidx)


def run_sweep(cfg: ExperimentConfig, layer: str | None = None) -> SweepOutput:
    g = load_graph_file(cfg)
    model = None
    if artifact(cfg, "model").exists():
        splits = load_splits(cfg, load_dataset(cfg))
        model = load_model(cfg, g, splits)
    else:
        log.warning("no trained model found; writing the ground-truth curve only")
    layer = cfg.sweep.layer if layer is None else (layer or None)
    res = sweep(cfg, g, model, layer)
    rows = []
    for k, size in enumerate(res.sizes):
        pv = float(res.predicted[k]) if res.predicted is not None else ""
        rows.append((int(size), float(res.truth[k]), float(res.truth_std[k]), pv))
    text = _csv_text(["initial", "true_fraction", "true_std", "predicted_fraction"], rows, cfg.meta())
    text += f"# transition_true={res.truth_index} transition_predicted={'' if res.predicted_index is None else res.predicted_index}\n"
    _write(cfg.out_dir / "sweep.csv", text)
    return res


def run_heatmap(cfg: ExperimentConfig) -> list[tuple]:
    g = load_graph_file(cfg)
    splits = load_splits(cfg, load_dataset(cfg))
    preds, _ = read_predictions(cfg, g.num_nodes)
    rows = heatmap_export(splits.test, preds)
    _write(cfg.out_dir / "heatmap.csv", _csv_text(["case_id", "initial", "final_true", "final_predicted"], rows, cfg.meta()))
    return rows
