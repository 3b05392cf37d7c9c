"""Run configuration: nested dataclasses stored as YAML."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import MISSING, asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Optional, Union

import yaml

from visa.dlfm import DLFMConfig
from visa.encoder import EncoderConfig
from visa.etgm import ETGMConfig
from visa.losses import LossConfig
from visa.model import AblationConfig
from visa.synthetic import FactorSpec

SEED_ENV = "VISA_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class OptimConfig:
    lr: float = 0.05
    final_lr: float = 1.6e-6
    momentum: float = 0.9
    weight_decay: float = 0.0
    epochs: int = 20
    warmup_epochs: int = 1
    grad_clip: float = 1.0
    schedule: str = "cosine"


@dataclass
class DataConfig:
    root: Optional[str] = None
    synthetic: FactorSpec = field(default_factory=FactorSpec)
    ids_per_batch: int = 8
    instances_per_id: int = 4

    @property
    def batch_size(self) -> int:
        return self.ids_per_batch * self.instances_per_id


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    etgm: ETGMConfig = field(default_factory=ETGMConfig)
    dlfm: DLFMConfig = field(default_factory=DLFMConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    seed: int = 0
    deterministic: bool = True
    out_dir: Optional[str] = None
    checkpoint_every: int = 0
    log_every: int = 1
    metric: str = "cosine"

    def validate(self) -> None:
        if self.optim.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.data.ids_per_batch < 2 or self.data.instances_per_id < 2:
            raise ConfigError("PK batches need >= 2 identities and >= 2 instances each")
        if self.optim.schedule != "cosine":
            raise ConfigError("only the cosine schedule is implemented")
        if not 1 <= self.etgm.top_k <= self.etgm.num_experts:
            raise ConfigError("top_k must be in [1, num_experts]")
        if self.dlfm.neighbors > self.encoder.num_patches:
            raise ConfigError("neighbors exceeds the number of patches")
        if tuple(self.data.synthetic.image_size) != tuple(self.encoder.img_size):
            raise ConfigError("synthetic image_size must match encoder img_size")
        if self.data.root is not None and not Path(self.data.root).exists():
            raise ConfigError(f"dataset root {self.data.root} does not exist")

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **dotted: Any) -> "RunConfig":
        """Copy with dotted-key overrides, e.g. ``replace(**{"etgm.top_k": 1})``."""
        new = copy.deepcopy(self)
        for key, value in dotted.items():
            set_dotted(new, key, value)
        return new


def set_dotted(cfg: Any, key: str, value: Any) -> None:
    *path, last = key.split(".")
    obj = cfg
    for part in path:
        obj = getattr(obj, part)
    if not hasattr(obj, last):
        raise ConfigError(f"unknown config key {key!r}")
    setattr(obj, last, value)


def _build(cls, data: Optional[dict]):
    data = dict(data or {})
    kwargs = {}
    known = {f.name: f for f in fields(cls)}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in {cls.__name__}")
        factory = known[key].default_factory
        sub = factory() if factory is not MISSING else None
        kwargs[key] = _build(type(sub), value) if is_dataclass(sub) and isinstance(value, dict) else value
    return cls(**kwargs)


def from_dict(data: dict) -> RunConfig:
    cfg = _build(RunConfig, data)
    return apply_env(cfg)


def apply_env(cfg: RunConfig) -> RunConfig:
    seed = os.environ.get(SEED_ENV)
    if seed is not None:
        cfg.seed = int(seed)
    return cfg


def load_config(path: Union[str, Path]) -> RunConfig:
    return from_dict(yaml.safe_load(Path(path).read_text()) or {})


def save_config(cfg: RunConfig, path: Union[str, Path]) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
