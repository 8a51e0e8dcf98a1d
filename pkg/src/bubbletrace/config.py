"""Pipeline configuration: one YAML document, one section per stage."""

from __future__ import annotations

import copy
import zlib
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .modify import PLANS


class ConfigError(ValueError):
    pass


@dataclass
class SyntheticSection:
    n_users: int = 500
    n_items: int = 120
    n_communities: int = 8
    bubble_strength: float = 0.8
    records_per_user: int = 10


@dataclass
class IngestSection:
    raw_path: str | None = None
    has_header: bool = False
    min_item_interactions: int = 100
    min_user_interactions: int = 10
    n_users: int | None = None
    synthetic: SyntheticSection = field(default_factory=SyntheticSection)


@dataclass
class CommunitySection:
    thresholds: list[int] = field(default_factory=lambda: [0, 100, 200, 300, 400, 500])
    selected_threshold: int = 100
    strategy: str = "sum"
    weighted_degree: bool = True
    resolution: float = 1.0


@dataclass
class ModelSection:
    embedding_dim: int = 128
    hidden_dim: int = 64
    lookback: int = 50
    flatten: bool = True
    forget_bias: float = 1.0
    batch_size: int = 2048
    epochs: int = 600
    learning_rate: float = 5e-3
    momentum: float = 0.9
    checkpoint_interval: int = 30


@dataclass
class CategorySection:
    band: float = 0.125
    top_k: int = 10
    random_pool_size: int | None = None


@dataclass
class BubbleSection:
    lookbacks: list[int] = field(default_factory=lambda: [5, 10, 20, 30, 40, 50])
    split: str = "test"


@dataclass
class InfluenceSection:
    include_initial_checkpoint: bool = False
    subset_size: int = 3000
    self_repetitions: int = 20
    self_batch_size: int = 256
    samples_per_category: int = 100
    cross_repetitions: int = 25
    cross_batch_size: int = 4096


@dataclass
class ModifySection:
    plans: list[str] = field(default_factory=lambda: list(PLANS))
    retrains_per_plan: int = 10


@dataclass
class PipelineConfig:
    seed: int = 0
    workspace: str | None = None
    ingest: IngestSection = field(default_factory=IngestSection)
    community: CommunitySection = field(default_factory=CommunitySection)
    model: ModelSection = field(default_factory=ModelSection)
    category: CategorySection = field(default_factory=CategorySection)
    bubble: BubbleSection = field(default_factory=BubbleSection)
    influence: InfluenceSection = field(default_factory=InfluenceSection)
    modify: ModifySection = field(default_factory=ModifySection)

    def to_dict(self) -> dict[str, Any]:
        return _as_dict(self)


def _as_dict(obj: Any) -> Any:
    if is_dataclass(obj):
        return {f.name: _as_dict(getattr(obj, f.name)) for f in fields(obj)}
    return copy.deepcopy(obj)


def _build(cls: type, data: dict[str, Any], where: str) -> Any:
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    default = cls()
    kwargs = {}
    for name, f in known.items():
        if name not in data:
            continue
        current = getattr(default, name)
        if is_dataclass(current):
            kwargs[name] = _build(type(current), data[name] or {}, f"{where}.{name}".lstrip("."))
        else:
            kwargs[name] = data[name]
    return cls(**kwargs)


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def validate(cfg: PipelineConfig) -> PipelineConfig:
    """Type and range checks for every numeric knob."""
    def pos_int(value: Any, name: str) -> None:
        _check(isinstance(value, int) and not isinstance(value, bool) and value > 0, f"{name} must be a positive integer")

    def nonneg_int(value: Any, name: str) -> None:
        _check(isinstance(value, int) and not isinstance(value, bool) and value >= 0, f"{name} must be a non-negative integer")

    nonneg_int(cfg.seed, "seed")
    ing, syn = cfg.ingest, cfg.ingest.synthetic
    nonneg_int(ing.min_item_interactions, "ingest.min_item_interactions")
    nonneg_int(ing.min_user_interactions, "ingest.min_user_interactions")
    if ing.n_users is not None:
        pos_int(ing.n_users, "ingest.n_users")
    for name in ("n_users", "n_items", "n_communities", "records_per_user"):
        pos_int(getattr(syn, name), f"ingest.synthetic.{name}")
    _check(0.0 <= float(syn.bubble_strength) <= 1.0, "ingest.synthetic.bubble_strength must lie in [0, 1]")
    _check(syn.n_items % syn.n_communities == 0, "ingest.synthetic.n_items must be divisible by n_communities")

    com = cfg.community
    _check(bool(com.thresholds), "community.thresholds must not be empty")
    for t in com.thresholds:
        nonneg_int(t, "community.thresholds entries")
    _check(list(com.thresholds) == sorted(com.thresholds), "community.thresholds must be ascending")
    _check(com.selected_threshold in com.thresholds, "community.selected_threshold must appear in community.thresholds")
    _check(com.strategy in ("sum", "count", "min"), "community.strategy must be sum, count or min")
    _check(float(com.resolution) > 0, "community.resolution must be positive")

    m = cfg.model
    for name in ("embedding_dim", "hidden_dim", "lookback", "batch_size", "epochs", "checkpoint_interval"):
        pos_int(getattr(m, name), f"model.{name}")
    _check(m.lookback <= 50, "model.lookback must be at most 50")
    _check(float(m.learning_rate) >= 0, "model.learning_rate must be non-negative")
    _check(0.0 <= float(m.momentum) < 1.0, "model.momentum must lie in [0, 1)")
    _check(m.epochs % m.checkpoint_interval == 0, "model.epochs must be a multiple of model.checkpoint_interval")

    _check(0.0 < float(cfg.category.band) < 0.5, "category.band must lie in (0, 0.5)")
    pos_int(cfg.category.top_k, "category.top_k")
    if cfg.category.random_pool_size is not None:
        pos_int(cfg.category.random_pool_size, "category.random_pool_size")

    for L in cfg.bubble.lookbacks:
        _check(isinstance(L, int) and 1 <= L <= 50, "bubble.lookbacks entries must lie in [1, 50]")
    _check(cfg.bubble.split in ("train", "validation", "test"), "bubble.split must name a split")

    inf = cfg.influence
    for name in ("subset_size", "self_repetitions", "self_batch_size", "samples_per_category", "cross_repetitions", "cross_batch_size"):
        pos_int(getattr(inf, name), f"influence.{name}")
    _check(inf.self_repetitions >= 2 and inf.cross_repetitions >= 2, "influence repetitions must be at least 2 for the t-test")

    _check(bool(cfg.modify.plans), "modify.plans must not be empty")
    for p in cfg.modify.plans:
        _check(p in PLANS, f"modify.plans: unknown plan {p!r}")
    pos_int(cfg.modify.retrains_per_plan, "modify.retrains_per_plan")
    return cfg


def from_dict(data: dict[str, Any] | None) -> PipelineConfig:
    return validate(_build(PipelineConfig, data or {}, ""))


def load_config(path: str | Path | None) -> PipelineConfig:
    """Read a YAML config; relative ``ingest.raw_path`` resolves against the file's folder."""
    if path is None:
        return from_dict({})
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from None
    cfg = from_dict(data)
    raw = cfg.ingest.raw_path
    if raw is not None and not Path(raw).is_absolute():
        cfg.ingest.raw_path = str((path.parent / raw).resolve())
    return cfg


def stage_seed(root: int, name: str) -> int:
    """Independent, reproducible seed for the named stream under ``root``."""
    ss = np.random.SeedSequence(root, spawn_key=(zlib.crc32(name.encode("utf-8")),))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
