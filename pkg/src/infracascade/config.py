"""Experiment configuration (TOML), hashing and dataset splitting."""
from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .cascade import CascadeParams, substream
from .graph import LayerKind
from .model import ABLATIONS, ModelConfig
from .netgen import ConfigError, GenConfig, reference_preset
from .pretrain import GpConfig, IeConfig, LpConfig, PretrainConfig


@dataclass(frozen=True)
class NetgenSection:
    scale: float = 1 / 40
    overrides: dict = field(default_factory=dict)

    def gen_config(self, seed: int) -> GenConfig:
        base = reference_preset(self.scale, seed=seed).to_dict()
        base.update(self.overrides)
        base["seed"] = seed
        cfg = GenConfig.from_dict(base)
        cfg.validate()
        return cfg


@dataclass(frozen=True)
class DatasetSection:
    count_per_size: int = 100
    min_size: int = 0
    max_size: int = 20
    layer: str | None = None  # restrict initial failures to one layer

    def sizes(self) -> range:
        return range(self.min_size, self.max_size + 1)


@dataclass(frozen=True)
class IcmSection:
    probabilities: tuple[float, ...] = (0.02, 0.05, 0.1, 0.2, 0.3)
    runs: int = 30


@dataclass(frozen=True)
class SweepSection:
    max_seed_size: int = 20
    reps: int = 50
    layer: str | None = "electric"


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    out: str = "runs/default"
    netgen: NetgenSection = NetgenSection()
    cascade: CascadeParams = CascadeParams()
    dataset: DatasetSection = DatasetSection()
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    k_folds: int = 5
    pretrain: PretrainConfig = PretrainConfig()
    model: ModelConfig = ModelConfig()
    icm: IcmSection = IcmSection()
    sweep: SweepSection = SweepSection()

    def __post_init__(self):
        f = tuple(float(x) for x in self.fractions)
        object.__setattr__(self, "fractions", f)
        if len(f) != 3 or any(x < 0 for x in f) or abs(sum(f) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must be three non-negative numbers summing to 1, got {f}")
        if self.k_folds < 2:
            raise ConfigError("k_folds must be >= 2")
        for name in (self.dataset.layer, self.sweep.layer):
            if name is not None:
                try:
                    LayerKind.parse(name)
                except ValueError as exc:
                    raise ConfigError(str(exc)) from None

    def semantic_dict(self) -> dict:
        """Every field that influences results (the seed and output path excluded)."""
        return {
            "netgen": {"scale": self.netgen.scale, "overrides": dict(sorted(self.netgen.overrides.items()))},
            "cascade": self.cascade.to_dict(),
            "dataset": asdict(self.dataset),
            "fractions": list(self.fractions),
            "k_folds": self.k_folds,
            "pretrain": self.pretrain.to_dict(),
            "model": self.model.to_dict(),
            "icm": {"probabilities": list(self.icm.probabilities), "runs": self.icm.runs},
            "sweep": asdict(self.sweep),
        }

    def config_hash(self) -> str:
        canon = json.dumps(self.semantic_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()

    def meta(self) -> dict:
        return {"config_hash": self.config_hash(), "seed": self.seed}

    def with_overrides(self, seed=None, out=None, ablation=None, threshold=None) -> "ExperimentConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=int(seed))
        if out is not None:
            cfg = replace(cfg, out=str(out))
        if ablation is not None:
            cfg = replace(cfg, model=replace(cfg.model, ablation=None if ablation == "none" else ablation))
        if threshold is not None:
            cfg = replace(cfg, model=replace(cfg.model, threshold=float(threshold)))
        return cfg

    @property
    def out_dir(self) -> Path:
        return Path(self.out)


def _section(doc: dict, name: str) -> dict:
    v = doc.get(name, {})
    if not isinstance(v, dict):
        raise ConfigError(f"[{name}] must be a table")
    return v


def _build(cls, data: dict, where: str):
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}]: {exc}") from None


def config_from_dict(doc: dict) -> ExperimentConfig:
    if "seed" not in doc:
        raise ConfigError("'seed' is mandatory")
    known = {"seed", "out", "netgen", "cascade", "dataset", "split", "pretrain", "model", "icm", "sweep"}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown top-level keys: {unknown}")
    ng = dict(_section(doc, "netgen"))
    scale = float(ng.pop("scale", 1 / 40))
    split = _section(doc, "split")
    pre = _section(doc, "pretrain")
    gp = dict(_section(pre, "gp"))
    if "clusters" in gp:
        gp["clusters"] = tuple(gp["clusters"])
    model = dict(_section(doc, "model"))
    if model.get("ablation") in ("", "none"):
        model["ablation"] = None
    ds = dict(_section(doc, "dataset"))
    if ds.get("layer") == "":
        ds["layer"] = None
    sw = dict(_section(doc, "sweep"))
    if sw.get("layer") == "":
        sw["layer"] = None
    icm = dict(_section(doc, "icm"))
    if "probabilities" in icm:
        icm["probabilities"] = tuple(float(p) for p in icm["probabilities"])
    unknown_split = sorted(set(split) - {"fractions", "k_folds"})
    if unknown_split:
        raise ConfigError(f"[split]: unknown keys {unknown_split}")
    try:
        GenConfig.from_dict({**reference_preset(scale).to_dict(), **ng})
    except TypeError as exc:
        raise ConfigError(f"[netgen]: {exc}") from None
    try:
        seed = int(doc["seed"])
    except (TypeError, ValueError):
        raise ConfigError("'seed' must be an integer") from None
    return ExperimentConfig(
        seed=seed,
        out=str(doc.get("out", "runs/default")),
        netgen=NetgenSection(scale, ng),
        cascade=_build(CascadeParams, _section(doc, "cascade"), "cascade"),
        dataset=_build(DatasetSection, ds, "dataset"),
        fractions=tuple(split.get("fractions", (0.6, 0.2, 0.2))),
        k_folds=int(split.get("k_folds", 5)),
        pretrain=PretrainConfig(
            _build(LpConfig, _section(pre, "lp"), "pretrain.lp"),
            _build(GpConfig, gp, "pretrain.gp"),
            _build(IeConfig, _section(pre, "ie"), "pretrain.ie"),
        ),
        model=_build(ModelConfig, model, "model"),
        icm=_build(IcmSection, icm, "icm"),
        sweep=_build(SweepSection, sw, "sweep"),
    )


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(doc)


# ------------------------------------------------------------------ splits


def _apportion(n: int, fractions: Sequence[float]) -> list[int]:
    """Largest-remainder rounding of n * fractions (ties to the earlier part)."""
    raw = [n * f for f in fractions]
    base = [int(np.floor(x + 1e-9)) for x in raw]
    left = n - sum(base)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - base[i]), i))
    for i in order[:left]:
        base[i] += 1
    return base


def _buckets(records) -> dict[int, list[int]]:
    out: dict[int, list[int]] = {}
    for k, r in enumerate(records):
        out.setdefault(len(r.initial_failed), []).append(k)
    return dict(sorted(out.items()))


def split(records, fractions=(0.6, 0.2, 0.2), seed: int = 0):
    """Stratified (by |D|) train/validation/test split; order follows case order."""
    records = list(records)
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ConfigError("fractions must be three non-negative numbers summing to 1")
    parts: list[list[int]] = [[], [], []]
    for size, idx in _buckets(records).items():
        perm = substream(seed, "split", size).permutation(len(idx))
        counts = _apportion(len(idx), fractions)
        cut = np.cumsum([0] + counts)
        for p in range(3):
            parts[p].extend(idx[i] for i in perm[cut[p] : cut[p + 1]])
    return tuple([records[i] for i in sorted(p)] for p in parts)


def kfold(records, k: int, seed: int = 0) -> np.ndarray:
    """Fold id per record, stratified by |D| with fold sizes differing by at most one."""
    records = list(records)
    if k < 2:
        raise ConfigError("k must be >= 2")
    if len(records) < k:
        raise ConfigError(f"cannot make {k} folds from {len(records)} records")
    folds = np.empty(len(records), dtype=np.int64)
    counter = 0
    for size, idx in _buckets(records).items():
        perm = substream(seed, "kfold", size).permutation(len(idx))
        for j in perm:
            folds[idx[j]] = counter % k
            counter += 1
    return folds
