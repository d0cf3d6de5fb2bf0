"""Model and training configuration, JSON persistence and ``key=value`` overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class ConfigError(ValueError):
    """Invalid configuration key, value or combination."""


@dataclass
class ModelConfig:
    image_size: int = 64
    patch_size: int = 4
    embed_dim: int = 48          # C', channels at level 1
    depths: tuple = (1, 1, 2, 1)
    window: int = 4
    head_dim: int = 24           # heads at level i = C_i // head_dim
    mlp_ratio: int = 4
    n_prompts: int = 4
    prompt_init_range: float = 0.02
    bayar_sizes: tuple = (3, 5, 7)
    faf_reduction: int = 4
    deform_heads: int = 2
    deform_points: int = 4
    deform_offset_scale: float = 0.5
    gamma_init: float = 0.5
    decoder_dim: int = 64
    decoder_heads: int = 4
    decoder_rounds: int = 3
    mask_threshold: float = 0.5
    backbone_init: str = "seeded"   # or "toy-pretrain"
    pretrain_steps: int = 60
    seed: int = 0
    dtype: str = "float32"
    # ablation switches
    use_sem: bool = True
    use_hfq: bool = True
    use_align: bool = True
    use_fuse: bool = True

    def __post_init__(self):
        self.depths = tuple(self.depths)
        self.bayar_sizes = tuple(self.bayar_sizes)
        self.validate()

    @property
    def n_levels(self) -> int:
        return len(self.depths)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def dims(self) -> list[int]:
        return [self.embed_dim * 2 ** i for i in range(self.n_levels)]

    def grids(self) -> list[int]:
        g = self.image_size // self.patch_size
        return [g // 2 ** i for i in range(self.n_levels)]

    def heads(self) -> list[int]:
        return [max(1, d // self.head_dim) for d in self.dims()]

    def validate(self) -> None:
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        g = self.image_size // self.patch_size
        if g % 2 ** (self.n_levels - 1):
            raise ConfigError(f"patch grid {g} cannot be halved {self.n_levels - 1} times")
        if self.embed_dim % len(self.bayar_sizes):
            raise ConfigError("embed_dim must split evenly across the BayarConv kernel sizes")
        for d, h in zip(self.dims(), self.heads()):
            if d % h:
                raise ConfigError(f"dim {d} not divisible by {h} heads")
        if self.decoder_dim % self.decoder_heads:
            raise ConfigError("decoder_dim must be divisible by decoder_heads")
        if self.embed_dim % self.deform_heads:
            raise ConfigError("embed_dim must be divisible by deform_heads")
        if self.decoder_rounds > self.n_levels - 1:
            raise ConfigError("decoder_rounds cannot exceed the number of coarse levels")
        if not (self.use_sem or self.use_hfq):
            raise ConfigError("at least one of use_sem / use_hfq must be enabled")
        if (self.use_align or self.use_fuse) and not (self.use_sem and self.use_hfq):
            raise ConfigError("use_align / use_fuse need both branches")
        if self.backbone_init not in ("seeded", "toy-pretrain"):
            raise ConfigError(f"unknown backbone_init {self.backbone_init!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")


@dataclass
class TrainConfig:
    max_lr: float = 1e-4
    min_lr: float = 1e-6
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    epochs: int = 80
    warmup_epochs: int = 5
    batch_size: int = 4
    restart_period: int | None = None   # steps per cosine cycle; None = one cycle
    pos_weight_max: float = 20.0
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.min_lr > self.max_lr:
            raise ConfigError("min_lr must be <= max_lr")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("warmup_epochs must be in [0, epochs)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: dict = field(default_factory=lambda: {"count": 8, "seed": 0, "image_size": 64})

    def to_dict(self) -> dict:
        return {"model": dataclasses.asdict(self.model), "train": dataclasses.asdict(self.train),
                "data": dict(self.data)}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {"model", "train", "data"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        return cls(model=_build(ModelConfig, d.get("model", {})),
                   train=_build(TrainConfig, d.get("train", {})),
                   data={**RunConfig().data, **d.get("data", {})})

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def _build(cls, values: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    """Read a JSON config (or defaults) and apply ``section.key=value`` overrides."""
    d = RunConfig().to_dict()
    if path is not None:
        try:
            loaded = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        for section, vals in loaded.items():
            if not isinstance(vals, dict):
                raise ConfigError(f"config section {section!r} must be an object")
            d.setdefault(section, {}).update(vals)
    for item in overrides or []:
        key, sep, raw = item.partition("=")
        if not sep or "." not in key:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        section, name = key.split(".", 1)
        if section not in d:
            raise ConfigError(f"unknown config section {section!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        d[section][name] = value
    return RunConfig.from_dict(d)
