"""Command-line entry point: ``infracascade <command> --config run.toml``.

Exit codes: 0 success, 2 invalid configuration or missing input, 3 runtime
failure.
"""
from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .autodiff import ContractError
from .config import load_config
from .graph import GraphFormatError, LayerKind
from .netgen import ConfigError

log = logging.getLogger("infracascade")

COMMANDS = {
    "netgen": "generate the synthetic network",
    "simulate": "label cascade records and split them",
    "pretrain": "train the link, pooling and inference embeddings",
    "train": "fit the cascade predictor",
    "predict": "predict the test split",
    "evaluate": "score predictions (or a baseline) on the test split",
    "sweep-phase": "failure volume against seed size, truth and model",
    "export-heatmap": "per-case initial vs final failure counts",
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="infracascade", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, helptext in COMMANDS.items():
        c = sub.add_parser(name, help=helptext)
        c.add_argument("--config", required=True, help="TOML experiment file")
        c.add_argument("--seed", type=int, help="override the root seed")
        c.add_argument("--out", help="override the run directory")
        c.add_argument("--ablation", help="no_lp, no_gp, no_ie, no_rgcn or none")
        c.add_argument("--threshold", type=float, help="decision threshold on failure probability")
        if name == "sweep-phase":
            c.add_argument("--layer", help="restrict seeds to one layer (electric, road, com, aoi, all)")
        if name == "evaluate":
            c.add_argument("--baseline", choices=["icm"], help="score a baseline instead of the model")
    return p


def _summary(report) -> str:
    auc = "n/a" if report.auc is None else f"{report.auc:.4f}"
    return f"auc={auc} precision={report.precision:.4f} recall={report.recall:.4f} f1={report.f1:.4f} cases={report.cases}"


def run(args) -> None:
    cfg = load_config(args.config).with_overrides(args.seed, args.out, args.ablation, args.threshold)
    cmd = args.command
    if cmd == "netgen":
        g = pipeline.run_netgen(cfg)
        print(f"wrote {pipeline.artifact(cfg, 'graph')}: {g!r}")
    elif cmd == "simulate":
        recs = pipeline.run_simulate(cfg)
        print(f"wrote {len(recs)} records to {pipeline.artifact(cfg, 'dataset')}")
    elif cmd == "pretrain":
        pipeline.run_pretrain(cfg)
        print(f"wrote {pipeline.artifact(cfg, 'embeddings')}")
    elif cmd == "train":
        m = pipeline.run_train(cfg)
        print(f"wrote {pipeline.artifact(cfg, 'model')} (best epoch {m.best_epoch})")
    elif cmd == "predict":
        probs, _ = pipeline.run_predict(cfg)
        print(f"wrote {len(probs)} predictions to {pipeline.artifact(cfg, 'predictions')}")
    elif cmd == "evaluate":
        rep = pipeline.run_evaluate(cfg, args.baseline)
        print(_summary(rep))
    elif cmd == "sweep-phase":
        layer = args.layer
        if layer == "all":
            layer = ""
        elif layer is not None:
            try:
                LayerKind.parse(layer)
            except GraphFormatError as exc:
                raise ConfigError(str(exc)) from None
        res = pipeline.run_sweep(cfg, layer)
        line = f"transition (truth) at {res.truth_index}"
        if res.predicted_index is not None:
            line += f", predicted at {res.predicted_index}"
        print(line)
    elif cmd == "export-heatmap":
        rows = pipeline.run_heatmap(cfg)
        print(f"wrote {len(rows)} rows to {cfg.out_dir / 'heatmap.csv'}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        run(args)
    except (ConfigError, pipeline.MissingArtifact) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ContractError, ValueError, RuntimeError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
