"""Run configuration: one nested document covering training, networks,
losses, vessel extraction and metrics, with flat ``a.b=c`` overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError
from .losses import LossWeights
from .regnet import RegnetConfig
from .transnets import DiscriminatorConfig, GeneratorConfig
from .vessels import VesselConfig

CONFIG_VERSION = 1
DIRECTIONS = ("t2v", "v2t")


@dataclass
class TrainConfig:
    direction: str = "t2v"
    image_size: int = 256
    epochs: int = 50
    batch_size: int = 32
    max_steps: int | None = None
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    lr_stn: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    fourier: bool = False
    seed: int = 0
    deterministic: bool = True
    mixed_precision: bool = False
    checkpoint_every: int = 1
    explode_threshold: float = 1e4

    def validate(self) -> "TrainConfig":
        if self.direction not in DIRECTIONS:
            raise ConfigError(f"direction must be one of {DIRECTIONS}, got {self.direction!r}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1 when set")
        if min(self.lr_g, self.lr_d, self.lr_stn) <= 0:
            raise ConfigError("learning rates must be positive")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0 (0 disables)")
        return self


@dataclass
class LossConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    features: str = "light"
    pretrained_features: bool = False
    feature_seed: int = 0


@dataclass
class MetricsConfig:
    mi_bins: int = 32


@dataclass
class Config:
    train: TrainConfig = field(default_factory=TrainConfig)
    regnet: RegnetConfig = field(default_factory=RegnetConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    vessels: VesselConfig = field(default_factory=VesselConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    version: int = CONFIG_VERSION

    def validate(self) -> "Config":
        self.train.validate()
        self.regnet.validate()
        self.generator.validate()
        self.discriminator.validate()
        self.vessels.validate()
        size = self.train.image_size
        if self.regnet.image_size != size or self.discriminator.image_size != size:
            raise ConfigError(
                f"image sizes disagree: train {size}, regnet {self.regnet.image_size}, "
                f"discriminator {self.discriminator.image_size}"
            )
        if size % self.generator.size_multiple:
            raise ConfigError(f"image_size {size} must be divisible by {self.generator.size_multiple}")
        if self.loss.features not in ("light", "vgg16"):
            raise ConfigError(f"unknown feature extractor {self.loss.features!r}")
        if self.metrics.mi_bins < 2:
            raise ConfigError("mi_bins must be >= 2")
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {self.version}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict | None) -> "Config":
        data = dict(data or {})
        # image_size written once under train propagates to the networks.
        size = (data.get("train") or {}).get("image_size")
        if size is not None:
            for key in ("regnet", "discriminator"):
                data.setdefault(key, {})
                data[key] = dict(data[key] or {})
                data[key].setdefault("image_size", size)
        return _build(cls, data, "").validate()

    def dump(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))
        return path


def _build(cls, data, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section {prefix or '<root>'} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(prefix + k for k in unknown)}")
    kwargs = {}
    hints = _nested_types(cls)
    for name, value in data.items():
        sub = hints.get(name)
        kwargs[name] = _build(sub, value, f"{prefix}{name}.") if sub else value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _nested_types(cls) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(default):
            out[f.name] = type(default)
    return out


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``section.key=value`` strings; values are parsed as YAML scalars."""
    data = yaml.safe_load(yaml.safe_dump(data)) or {}
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = [p for p in key.strip().split(".") if p]
        if not parts:
            raise ConfigError(f"empty override key in {item!r}")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key} descends into a scalar")
        node[parts[-1]] = _parse_scalar(raw)
    return data


def _parse_scalar(raw: str):
    value = yaml.safe_load(raw)
    if isinstance(value, str):
        # YAML 1.1 reads "5e-4" as a string.
        try:
            return float(value)
        except ValueError:
            pass
    return value


def load_config(path=None, overrides=None) -> Config:
    """Defaults, then the file at ``path`` (if any), then overrides."""
    data: dict = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if overrides:
        data = apply_overrides(data, overrides)
    # Round-trip through the full default document so unknown keys are caught
    # and nested sections merge rather than replace.
    merged = _deep_merge(Config().to_dict(), data)
    size = (data.get("train") or {}).get("image_size")
    if size is not None:
        for key in ("regnet", "discriminator"):
            if "image_size" not in (data.get(key) or {}):
                merged[key]["image_size"] = size
    return Config.from_dict(merged)


def _deep_merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def desk_config(image_size: int = 64, **train_overrides) -> Config:
    """Reduced configuration for CPU-scale runs: depth-4 ViT on 32px patches,
    narrow generators/discriminators, the light feature extractor."""
    cfg = Config(
        train=TrainConfig(image_size=image_size, batch_size=8, epochs=1000, **train_overrides),
        regnet=RegnetConfig(
            image_size=image_size,
            patch_size=32,
            vit_depth=4,
            embed_dim=128,
            num_heads=4,
            mlp_widths=[256, 128, 64],
        ),
        generator=GeneratorConfig(base_channels=4, max_channels=32),
        discriminator=DiscriminatorConfig(image_size=image_size, base_channels=8, max_channels=64),
    )
    return cfg.validate()
