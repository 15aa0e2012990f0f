"""Run configuration. Defaults follow the published hyperparameters; see
``desk_profile`` for the small settings used on a single CPU."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List

import yaml

VARIANTS = ("flip", "flip_id", "flip_plm", "scratch")
LR_GRID = [1e-5, 5e-5, 1e-4, 5e-4, 1e-3, 5e-3]


@dataclass
class ModelConfig:
    backbone: str = "dcnv2"
    emb_dim: int = 32
    dnn_sizes: List[int] = field(default_factory=lambda: [300, 300, 128])
    cross_depth: int = 3
    att_layers: int = 2
    att_heads: int = 2
    att_dim: int = 16
    d_text: int = 128
    n_layers: int = 2
    n_heads: int = 4
    l_max: int = 256
    dropout: float = 0.0
    v_max: int = 30000
    proj_dim: int = 128


@dataclass
class PretrainConfig:
    epochs: int = 30
    batch_size: int = 1024
    lr: float = 5e-5
    weight_decay: float = 0.01
    r_text: float = 0.15
    r_tab: float = 0.15
    k_noise: int = 25
    tau: float = 0.7
    noise_scope: str = "field"


@dataclass
class FinetuneConfig:
    epochs: int = 10
    batch_size: int = 256
    lr: float | None = None  # None -> select from lr_grid on validation AUC
    lr_grid: List[float] = field(default_factory=lambda: list(LR_GRID))
    patience: int = 2
    val_fraction: float = 0.1
    eval_batch_size: int = 2048


@dataclass
class TrainConfig:
    seed: int = 42
    variant: str = "flip"
    ablation: str = "full"
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def digest(self) -> str:
        return _digest(self.to_dict())

    def model_digest(self) -> str:
        return _digest(asdict(self.model))

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "TrainConfig":
        return merge(cls(), d)


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def merge(config, updates: Dict[str, Any]):
    """Return a copy of a (nested) dataclass with `updates` applied; unknown keys raise."""
    names = {f.name: f for f in dataclasses.fields(config)}
    changes = {}
    for key, value in updates.items():
        if key not in names:
            raise KeyError(f"unknown config key {key!r} in {type(config).__name__}")
        current = getattr(config, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise TypeError(f"config section {key!r} expects a mapping")
            changes[key] = merge(current, value)
        else:
            changes[key] = value
    return dataclasses.replace(config, **changes)


def set_dotted(updates: Dict[str, Any], dotted: str, value: Any) -> None:
    node = updates
    *path, leaf = dotted.split(".")
    for p in path:
        node = node.setdefault(p, {})
    node[leaf] = value


def load_config(path: str | Path | None = None, overrides: Dict[str, Any] | None = None,
                base: TrainConfig | None = None) -> TrainConfig:
    """Precedence: overrides > config file > base (defaults)."""
    cfg = base or TrainConfig()
    if path is not None:
        data = yaml.safe_load(Path(path).read_text()) or {}
        cfg = merge(cfg, data)
    if overrides:
        cfg = merge(cfg, overrides)
    if cfg.variant not in VARIANTS:
        raise ValueError(f"unknown variant {cfg.variant!r}; choose from {VARIANTS}")
    return cfg


def desk_profile(seed: int = 42) -> TrainConfig:
    """Tiny towers and short schedules that fit a one-core workstation."""
    return TrainConfig(
        seed=seed,
        model=ModelConfig(emb_dim=16, dnn_sizes=[64, 32], cross_depth=2, d_text=32, n_layers=1, n_heads=2,
                          l_max=64, proj_dim=32),
        pretrain=PretrainConfig(epochs=30, batch_size=256, lr=3e-3),
        finetune=FinetuneConfig(epochs=10, batch_size=256, lr=None, lr_grid=[1e-3, 5e-3], patience=2),
    )
