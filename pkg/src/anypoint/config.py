"""Configuration dataclasses and the TOML config-file loader.

A config file has up to four tables, each optional::

    [model]     # ModelConfig fields
    [train]     # TrainConfig fields
    [world]     # WorldConfig fields (synthetic data)
    [track]     # TrackConfig fields (session behavior)

Unknown keys are rejected so typos fail loudly.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from anypoint.errors import ConfigError
from anypoint.synthworld import WorldConfig

CCA_MODES = ("every_two_point", "element_wise", "point_level")
VLTA_NORMS = ("renorm", "paper_literal")
ROPE_MODES = ("additive", "rotate")
CONTEXT_UPDATES = ("frozen", "vlta", "mlp")
FUSION_MODES = ("mlp", "center")
REBASE_MODES = ("off", "on_cut", "always")


@dataclass
class ModelConfig:
    feature_dim: int = 32
    stride: int = 4
    extractor_width: int = 16
    num_layers: int = 2
    grid_size: int = 3
    grid_spacing: float = 1.0
    num_offsets: int = 8
    offset_radius: float = 2.0
    ffn_hidden: int = 64
    num_heads: int = 1
    use_vlta: bool = True
    use_cca: bool = True
    use_self_attn: bool = True
    vlta_visibility: bool = True
    vlta_norm: str = "renorm"
    rope_mode: str = "additive"
    memory_cap: int | None = None
    cca_mode: str = "every_two_point"
    context_update: str = "frozen"
    fusion_mode: str = "mlp"
    detach_memory: bool = True
    detach_position: bool = True
    offset_pos_encoding: bool = False

    def validate(self):
        if self.grid_size < 1 or self.grid_size % 2 == 0:
            raise ConfigError(f"grid_size must be a positive odd integer, got {self.grid_size}")
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        if self.feature_dim < 4 or self.feature_dim % 4:
            raise ConfigError("feature_dim must be a positive multiple of 4")
        if self.num_heads < 1 or self.feature_dim % self.num_heads:
            raise ConfigError("num_heads must divide feature_dim")
        if self.num_offsets < 1:
            raise ConfigError("num_offsets must be >= 1")
        if self.stride < 1 or self.stride & (self.stride - 1):
            raise ConfigError("stride must be a power of two")
        if self.memory_cap is not None and self.memory_cap < 1:
            raise ConfigError("memory_cap must be >= 1 (or unset for unlimited)")
        for name, allowed in (("cca_mode", CCA_MODES), ("vlta_norm", VLTA_NORMS), ("rope_mode", ROPE_MODES),
                              ("context_update", CONTEXT_UPDATES), ("fusion_mode", FUSION_MODES)):
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        return self


@dataclass
class TrackConfig:
    rebase: str = "on_cut"
    cut_threshold: float = 0.2
    # 1 = position from the previous frame; >1 re-creates windowed initialization
    window: int = 1
    dump_attn: bool = False
    diag_dir: str | None = None
    events_path: str | None = None

    def validate(self):
        if self.rebase not in REBASE_MODES:
            raise ConfigError(f"rebase must be one of {REBASE_MODES}, got {self.rebase!r}")
        if self.window < 1:
            raise ConfigError("window must be >= 1")
        if not self.cut_threshold > 0:
            raise ConfigError("cut_threshold must be positive")
        return self


@dataclass
class TrainConfig:
    iterations: int = 2000
    lr: float = 1e-3
    lr_min_ratio: float = 0.05
    warmup: int = 50
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 1e-4
    batch_size: int = 2
    accum_steps: int = 4
    vis_weight: float = 1.0
    aux_loss: bool = True
    invisible_mask: bool = True
    grad_clip: float = 1.0
    seed: int = 0
    log_every: int = 50
    stage2_iterations: int = 300
    stage2_lr: float = 3e-3

    def validate(self):
        if self.iterations < 0 or self.stage2_iterations < 0:
            raise ConfigError("iteration counts must be non-negative")
        if self.batch_size < 1 or self.accum_steps < 1:
            raise ConfigError("batch_size and accum_steps must be >= 1")
        if self.lr < 0 or self.stage2_lr < 0:
            raise ConfigError("learning rates must be non-negative")
        return self


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    world: WorldConfig = field(default_factory=WorldConfig)
    track: TrackConfig = field(default_factory=TrackConfig)

    def validate(self):
        self.model.validate()
        self.train.validate()
        self.world.validate()
        self.track.validate()
        return self

    def to_dict(self):
        return {name: _plain(dataclasses.asdict(getattr(self, name))) for name in ("model", "train", "world", "track")}

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {"model", "train", "world", "track"}
        if unknown:
            raise ConfigError(f"unknown config tables: {sorted(unknown)}")
        return cls(
            model=_build(ModelConfig, d.get("model", {})),
            train=_build(TrainConfig, d.get("train", {})),
            world=_build(WorldConfig, d.get("world", {})),
            track=_build(TrackConfig, d.get("track", {})),
        ).validate()


def _plain(d):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _build(cls, values):
    values = dict(values)
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    for k, v in values.items():
        if isinstance(v, list):
            values[k] = tuple(v)
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path=None):
    if path is None:
        return Config().validate()
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return Config.from_dict(data)


def replace(cfg, **changes):
    return dataclasses.replace(cfg, **changes)
