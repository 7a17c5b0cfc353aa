"""Run configuration: nested dataclasses loaded from YAML with strict key checking."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

# Halving milestones of the full-length schedule and its total length.
REFERENCE_MILESTONES = (128_000, 192_000, 224_000, 240_000, 244_000, 246_000, 247_000)
REFERENCE_TOTAL_ITERS = 248_000


class ConfigError(ValueError):
    """Invalid configuration. ``keys`` lists the offending dotted keys."""

    def __init__(self, message: str, keys: list[str] | None = None):
        super().__init__(message)
        self.keys = list(keys or [])


@dataclass
class LossWeights:
    lambda_cyc: float = 0.5
    lambda_DP: float = 0.5
    lambda_C: float = 0.001
    lambda_id: float = 0.1


@dataclass
class DataConfig:
    image_size: int = 32
    channels: int = 3
    d_id: int = 8
    d_ex: int = 2
    synth_ids: int = 200
    synth_per_id: int = 20
    real_ids: int = 200
    real_per_id: int = 20
    paired: int = 100
    heldout_ids: int = 50
    heldout_per_id: int = 10
    pretrain_ids: int = 100
    pretrain_per_id: int = 20
    # First identity label of each split; None packs the splits back to back.
    synth_id_start: int | None = None
    real_id_start: int | None = None
    paired_id_start: int | None = None
    heldout_id_start: int | None = None
    pretrain_id_start: int | None = None


@dataclass
class NetConfig:
    base_channels: int = 16
    num_residual_blocks: int = 3
    dropout_keep: float = 0.9
    use_skip: bool = True
    inverse_use_skip: bool = True
    disc_channels: int = 16
    bottleneck: int = 8
    embed_channels: int = 16
    embedding_dim: int = 32


@dataclass
class IdentityConfig:
    eta: float = 1.0
    beta: float = 0.95
    eq7_sign: str = "magnet"
    sigma_floor: float = 1e-6
    sigma_stop_gradient: bool = True
    interpret_beta_as_retention: bool = False
    use_identity_pixel_loss: bool = True


@dataclass
class EquilibriumConfig:
    rate: float = 0.001
    gamma: float = 0.5


@dataclass
class PretrainConfig:
    iters: int = 1500
    batch_size: int = 64
    lr: float = 2e-3
    weight_decay: float = 0.0


@dataclass
class TrainConfig:
    seed: int = 0
    total_iters: int = 5000
    batch_size: int = 16
    base_lr: float = 8e-5
    # None derives the reference milestones scaled to total_iters.
    lr_milestones: list[int] | None = None
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    ema_decay: float = 0.999
    log_every: int = 100
    checkpoint_every: int = 0
    grid_every: int = 0
    loss: LossWeights = field(default_factory=LossWeights)
    data: DataConfig = field(default_factory=DataConfig)
    nets: NetConfig = field(default_factory=NetConfig)
    identity: IdentityConfig = field(default_factory=IdentityConfig)
    equilibrium: EquilibriumConfig = field(default_factory=EquilibriumConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)

    def milestones(self) -> list[int]:
        if self.lr_milestones is not None:
            return list(self.lr_milestones)
        scale = self.total_iters / REFERENCE_TOTAL_ITERS
        return [int(round(m * scale)) for m in REFERENCE_MILESTONES]


def validate(cfg: TrainConfig) -> TrainConfig:
    bad: list[str] = []
    if cfg.batch_size < 2:
        bad.append("batch_size")
    if cfg.total_iters < 0:
        bad.append("total_iters")
    if cfg.base_lr <= 0:
        bad.append("base_lr")
    if not 0.0 <= cfg.ema_decay <= 1.0:
        bad.append("ema_decay")
    ms = cfg.milestones()
    # scaled reference milestones collapse below a few hundred iterations; set them explicitly there
    if any(b <= a for a, b in zip(ms, ms[1:])) or any(m < 0 for m in ms):
        bad.append("lr_milestones")
    for name, value in dataclasses.asdict(cfg.loss).items():
        if value < 0:
            bad.append(f"loss.{name}")
    if cfg.identity.eq7_sign not in ("magnet", "as_printed"):
        bad.append("identity.eq7_sign")
    if not 0.0 < cfg.nets.dropout_keep <= 1.0:
        bad.append("nets.dropout_keep")
    if cfg.data.image_size < 16:
        bad.append("data.image_size")
    if cfg.data.channels not in (1, 3):
        bad.append("data.channels")
    for name in ("synth_ids", "synth_per_id", "real_ids", "real_per_id", "paired",
                 "heldout_ids", "heldout_per_id", "pretrain_ids", "pretrain_per_id"):
        if getattr(cfg.data, name) < 1:
            bad.append(f"data.{name}")
    if bad:
        raise ConfigError("invalid configuration values: " + ", ".join(bad), bad)
    return cfg


def _from_dict(cls, data: dict, prefix: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping at '{prefix or '<root>'}'", [prefix or "<root>"])
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = [prefix + k for k in data if k not in fields]
    if unknown:
        raise ConfigError("unknown configuration keys: " + ", ".join(unknown), unknown)
    kwargs = {}
    for key, value in data.items():
        default = getattr(cls(), key)
        if dataclasses.is_dataclass(default):
            kwargs[key] = _from_dict(type(default), value or {}, prefix + key + ".")
        elif isinstance(default, tuple):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def from_dict(data: dict | None) -> TrainConfig:
    return validate(_from_dict(TrainConfig, data or {}))


def to_dict(cfg: TrainConfig) -> dict[str, Any]:
    out = dataclasses.asdict(cfg)

    def fix(node):
        for k, v in node.items():
            if isinstance(v, tuple):
                node[k] = list(v)
            elif isinstance(v, dict):
                fix(v)

    fix(out)
    return out


def load_config(path: str | Path | None) -> TrainConfig:
    if path is None:
        return validate(TrainConfig())
    with open(path) as f:
        data = yaml.safe_load(f) or {}
    return from_dict(data)


def set_key(data: dict, dotted: str, value: Any) -> None:
    """Set ``a.b.c`` inside a nested dict, creating intermediate mappings."""
    node = data
    *parents, leaf = dotted.split(".")
    for p in parents:
        node = node.setdefault(p, {})
    node[leaf] = value


def dump_config(cfg: TrainConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def fingerprint(cfg: TrainConfig) -> str:
    import hashlib

    return hashlib.sha256(dump_config(cfg).encode()).hexdigest()[:16]
