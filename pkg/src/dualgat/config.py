"""Pipeline configuration: JSON in, validated dataclasses out."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields

from .data import TumorSpec
from .efficiency import DistillConfig
from .graphbuild import GraphConfig
from .seghead import SegLossConfig
from .trainer import TrainConfig

ENV_CONFIG = "DUALGAT_CONFIG"


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    seed: int = 0
    side: int = 64
    patch_side: int = 8
    n_train: int = 8
    n_val: int = 2
    radii: list = field(default_factory=lambda: [28.0, 20.0, 14.0])
    center_range: list = field(default_factory=lambda: [0.4, 0.6])
    anisotropy: list = field(default_factory=lambda: [0.85, 1.15])
    noise: float = 0.1


@dataclass
class GraphSection:
    k_spatial: int = 6
    k_semantic: int = 8


@dataclass
class ModelSection:
    layers: int = 2
    heads: int = 4
    embed_dim: int = 32
    hidden_dim: int = 32
    leaky_slope: float = 0.2
    seed: int = 0


@dataclass
class TrainSection:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    epochs: int = 20
    seed: int = 0
    cosine: bool = False
    checkpoint_every: int = 0


@dataclass
class DistillSection:
    temperature: float = 2.0
    kd_weight: float = 0.5
    epochs: int = 10
    learning_rate: float = 1e-3


@dataclass
class SegLossSection:
    dice_weight: float = 1.0
    ce_weight: float = 1.0
    smooth: float = 1e-5


@dataclass
class PruneSection:
    percent: float = 50.0


@dataclass
class BenchSection:
    nodes: int = 10_000
    repeats: int = 20
    threads: int = 1
    seed: int = 0


@dataclass
class PathsSection:
    out_dir: str = "."


SECTIONS = {
    "data": DataSection,
    "graph": GraphSection,
    "model": ModelSection,
    "train": TrainSection,
    "distill": DistillSection,
    "seg_loss": SegLossSection,
    "prune": PruneSection,
    "bench": BenchSection,
    "paths": PathsSection,
}

_pos = (lambda v: v > 0, "must be > 0")
_nonneg = (lambda v: v >= 0, "must be >= 0")
_ge1 = (lambda v: v >= 1, "must be >= 1")
_unit = (lambda v: 0 <= v < 1, "must lie in [0, 1)")

CHECKS = {
    "data.side": _pos, "data.patch_side": _pos, "data.n_train": _ge1, "data.n_val": _nonneg,
    "data.noise": _nonneg,
    "data.radii": (lambda v: len(v) == 3 and v[0] > v[1] > v[2] > 0,
                   "must be three radii with edema > core > enhancing > 0"),
    "data.center_range": (lambda v: len(v) == 2 and 0 <= v[0] <= v[1] <= 1, "must be [lo, hi] within [0, 1]"),
    "data.anisotropy": (lambda v: len(v) == 2 and 0 < v[0] <= v[1], "must be [lo, hi] with 0 < lo <= hi"),
    "graph.k_spatial": _ge1, "graph.k_semantic": _ge1,
    "model.layers": _nonneg, "model.heads": _ge1, "model.embed_dim": _ge1, "model.hidden_dim": _ge1,
    "model.leaky_slope": (lambda v: 0 < v < 1, "must lie in (0, 1)"),
    "train.learning_rate": _nonneg, "train.beta1": _unit, "train.beta2": _unit, "train.eps": _pos,
    "train.weight_decay": _nonneg, "train.epochs": _ge1, "train.checkpoint_every": _nonneg,
    "distill.temperature": (lambda v: v > 1, "temperature tau must be > 1"),
    "distill.kd_weight": (lambda v: math.isfinite(v) and v >= 0, "kd weight lambda must be finite and >= 0"),
    "distill.epochs": _ge1, "distill.learning_rate": _nonneg,
    "seg_loss.dice_weight": _nonneg, "seg_loss.ce_weight": _nonneg, "seg_loss.smooth": _pos,
    "prune.percent": (lambda v: 0 <= v < 100, "must lie in [0, 100)"),
    "bench.nodes": _ge1, "bench.repeats": _ge1, "bench.threads": _ge1,
}


@dataclass
class PipelineConfig:
    data: DataSection = field(default_factory=DataSection)
    graph: GraphSection = field(default_factory=GraphSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    distill: DistillSection = field(default_factory=DistillSection)
    seg_loss: SegLossSection = field(default_factory=SegLossSection)
    prune: PruneSection = field(default_factory=PruneSection)
    bench: BenchSection = field(default_factory=BenchSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    # component views
    def graph_config(self) -> GraphConfig:
        return GraphConfig(self.graph.k_spatial, self.graph.k_semantic)

    def tumor_spec(self) -> TumorSpec:
        d = self.data
        return TumorSpec(tuple(d.radii), tuple(d.center_range), tuple(d.anisotropy), d.noise)

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(t.learning_rate, t.beta1, t.beta2, t.eps, t.weight_decay, t.epochs, t.seed, t.cosine)

    def distill_train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(self.distill.learning_rate, t.beta1, t.beta2, t.eps, t.weight_decay,
                           self.distill.epochs, t.seed, t.cosine)

    def distill_config(self) -> DistillConfig:
        return DistillConfig(self.distill.temperature, self.distill.kd_weight)

    def seg_loss_config(self) -> SegLossConfig:
        s = self.seg_loss
        return SegLossConfig(s.dice_weight, s.ce_weight, s.smooth)


def _coerce(key: str, default, value):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool)
                                                  for v in value):
            raise ConfigError(f"{key}: expected a list of numbers, got {value!r}")
        return [float(v) for v in value]
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{key}: unsupported value {value!r}")


def from_dict(obj) -> PipelineConfig:
    if not isinstance(obj, dict):
        raise ConfigError("config must be a JSON object")
    cfg = PipelineConfig()
    for section, body in obj.items():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config key {section!r}")
        if not isinstance(body, dict):
            raise ConfigError(f"{section}: expected an object")
        target = getattr(cfg, section)
        names = {f.name for f in fields(target)}
        for key, value in body.items():
            full = f"{section}.{key}"
            if key not in names:
                raise ConfigError(f"unknown config key {full!r}")
            setattr(target, key, _coerce(full, getattr(target, key), value))
    validate(cfg)
    return cfg


def validate(cfg: PipelineConfig) -> None:
    for full, (check, message) in CHECKS.items():
        section, key = full.split(".")
        value = getattr(getattr(cfg, section), key)
        if not check(value):
            raise ConfigError(f"{full}={value!r}: {message}")
    s = cfg.seg_loss
    if s.dice_weight == 0 and s.ce_weight == 0:
        raise ConfigError("seg_loss.dice_weight, seg_loss.ce_weight: must not both be zero")
    if cfg.data.side % cfg.data.patch_side:
        raise ConfigError(f"data.side={cfg.data.side}: must be a multiple of data.patch_side={cfg.data.patch_side}")


def parse_config(text: str) -> PipelineConfig:
    try:
        obj = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON: {exc}") from None
    return from_dict(obj)
