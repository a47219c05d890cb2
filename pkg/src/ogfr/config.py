"""Run configuration: one JSON document, validated, with a stable digest."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Any

from .errors import ConfigError


@dataclass
class ModelConfig:
    height: int = 64
    width: int = 32
    patch: int = 8
    stride: int = 8
    dim: int = 64
    heads: int = 4
    depth: int = 2
    mlp_ratio: int = 4
    n_parts: int = 8
    n_coarse: int = 4
    n_cameras: int = 4
    gamma1: float = 3.0
    gamma2: float = 3.0
    occlusion_threshold: int = 5
    use_fep: bool = True
    init_std: float = 0.02


@dataclass
class LossConfig:
    alpha: float = 0.3
    beta: float = 0.4
    mu1: float = 0.5
    mu2: float = 0.5
    margin: float = 0.3
    mse_reduction: str = "token"


@dataclass
class DataConfig:
    n_ids: int = 10
    imgs_per_id: int = 6
    query_per_id: int = 1
    gallery_per_id: int = 2
    n_cameras: int = 4
    occlusion_min: float = 0.1
    occlusion_max: float = 0.4
    pose_jitter: int = 2


@dataclass
class OptimConfig:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 20
    max_steps: int = 0
    ids_per_batch: int = 4
    imgs_per_batch_id: int = 4
    student_occlusion_prob: float = 0.5
    grad_clip: float = 5.0


@dataclass
class RLConfig:
    lr: float = 1.0
    baseline_refresh_epochs: int = 2
    reward_clip: float = 1.0


@dataclass
class Config:
    seed: int = 0
    dtype: str = "float32"
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    data: DataConfig = field(default_factory=DataConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    rl: RLConfig = field(default_factory=RLConfig)

    def __post_init__(self):
        validate(self)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    def data_hash(self) -> str:
        """Digest of the fields that determine a generated dataset."""
        payload = {"seed": self.seed, "data": dataclasses.asdict(self.data),
                   "height": self.model.height, "width": self.model.width,
                   "n_parts": self.model.n_parts}
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def replace(self, **sections) -> "Config":
        """Copy with some fields overridden; nested sections take dicts."""
        d = self.to_dict()
        for key, value in sections.items():
            if isinstance(value, dict):
                d[key].update(value)
            else:
                d[key] = value
        return from_dict(d)

    @classmethod
    def from_json(cls, text: str) -> "Config":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        return from_dict(raw)


_SECTIONS = {"model": ModelConfig, "loss": LossConfig, "data": DataConfig,
             "optim": OptimConfig, "rl": RLConfig}


def _build(cls, raw: Any, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for name, value in raw.items():
        default = getattr(cls(), name) if name not in _SECTIONS else None
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{where}.{name}: expected a boolean")
        elif isinstance(default, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{where}.{name}: expected an integer")
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{where}.{name}: expected a number")
            value = float(value)
        elif isinstance(default, str) and not isinstance(value, str):
            raise ConfigError(f"{where}.{name}: expected a string")
        kwargs[name] = value
    return cls(**kwargs)


def from_dict(raw: dict) -> Config:
    if not isinstance(raw, dict):
        raise ConfigError("config: expected an object")
    unknown = sorted(set(raw) - {f.name for f in dataclasses.fields(Config)})
    if unknown:
        raise ConfigError(f"config: unknown keys {unknown}")
    top = {k: v for k, v in raw.items() if k not in _SECTIONS}
    sections = {k: _build(cls, raw.get(k, {}), k) for k, cls in _SECTIONS.items()}
    if "seed" in top and (isinstance(top["seed"], bool) or not isinstance(top["seed"], int)):
        raise ConfigError("config.seed: expected an integer")
    if "dtype" in top and not isinstance(top["dtype"], str):
        raise ConfigError("config.dtype: expected a string")
    return Config(**top, **sections)


def load(path) -> Config:
    with open(path, encoding="utf-8") as fh:
        return Config.from_json(fh.read())


def validate(cfg: Config) -> None:
    m, d, o, loss, rl = cfg.model, cfg.data, cfg.optim, cfg.loss, cfg.rl
    if cfg.dtype not in ("float32", "float64"):
        raise ConfigError(f"dtype must be float32 or float64, got {cfg.dtype!r}")
    if cfg.seed < 0:
        raise ConfigError("seed must be non-negative")
    if m.dim % m.heads:
        raise ConfigError(f"dim {m.dim} is not divisible by heads {m.heads}")
    if m.patch > m.height or m.patch > m.width or m.stride < 1 or m.patch < 1:
        raise ConfigError("patch must fit the image and stride must be >= 1")
    if m.n_parts != 8 or m.n_coarse != 4:
        raise ConfigError("the part layout is fixed at 8 fine and 4 coarse parts")
    if m.depth < 1 or m.mlp_ratio < 1 or m.n_cameras < 1:
        raise ConfigError("depth, mlp_ratio and n_cameras must be positive")
    if m.occlusion_threshold < 0:
        raise ConfigError("occlusion_threshold must be >= 0")
    if d.n_cameras != m.n_cameras:
        raise ConfigError("data.n_cameras must equal model.n_cameras")
    if d.n_ids < 2:
        raise ConfigError(f"data.n_ids must be >= 2, got {d.n_ids}")
    if d.imgs_per_id < 2:
        raise ConfigError(f"data.imgs_per_id must be >= 2, got {d.imgs_per_id}")
    if d.query_per_id < 1 or d.gallery_per_id < 1:
        raise ConfigError("query_per_id and gallery_per_id must be >= 1")
    if not 0.0 <= d.occlusion_min <= d.occlusion_max <= 1.0:
        raise ConfigError("need 0 <= occlusion_min <= occlusion_max <= 1")
    if d.pose_jitter < 0:
        raise ConfigError("pose_jitter must be >= 0")
    for name in ("alpha", "beta", "mu1", "mu2", "margin"):
        if getattr(loss, name) < 0:
            raise ConfigError(f"loss.{name} must be >= 0")
    if loss.mse_reduction not in ("token", "sum"):
        raise ConfigError(f"loss.mse_reduction must be 'token' or 'sum', got {loss.mse_reduction!r}")
    if o.lr <= 0 or o.momentum < 0 or o.weight_decay < 0:
        raise ConfigError("optimizer lr must be > 0; momentum and weight_decay >= 0")
    if o.epochs < 1 or o.max_steps < 0:
        raise ConfigError("epochs must be >= 1 and max_steps >= 0")
    if o.ids_per_batch < 2 or o.imgs_per_batch_id < 1:
        raise ConfigError("batches need >= 2 identities and >= 1 image per identity")
    if not 0.0 <= o.student_occlusion_prob <= 1.0:
        raise ConfigError("student_occlusion_prob must lie in [0, 1]")
    if rl.lr < 0 or rl.baseline_refresh_epochs < 1 or rl.reward_clip <= 0:
        raise ConfigError("rl.lr >= 0, baseline_refresh_epochs >= 1, reward_clip > 0")
