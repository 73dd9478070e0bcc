"""Image-translation networks: U-NET generators and PatchGAN discriminators,
both using anti-aliased (blur-pooled) downsampling."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, InvalidArgumentError


@dataclass
class GeneratorConfig:
    encoder_blocks: int = 5
    decoder_blocks: int = 4
    base_channels: int = 64
    max_channels: int = 512
    use_blurpool: bool = True
    in_channels: int = 3
    out_channels: int = 3

    def validate(self) -> "GeneratorConfig":
        if self.encoder_blocks < 2 or self.decoder_blocks != self.encoder_blocks - 1:
            raise ConfigError("U-NET needs decoder_blocks == encoder_blocks - 1 >= 1")
        if self.base_channels < 1:
            raise ConfigError("base_channels must be positive")
        return self

    @property
    def size_multiple(self) -> int:
        return 2 ** (self.encoder_blocks - 1)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DiscriminatorConfig:
    image_size: int = 256
    patch_out: int = 16
    base_channels: int = 64
    max_channels: int = 512
    use_blurpool: bool = True
    in_channels: int = 3

    def validate(self) -> "DiscriminatorConfig":
        ratio = self.image_size / self.patch_out
        if ratio < 1 or ratio != 2 ** round(math.log2(ratio)):
            raise ConfigError(
                f"image_size/patch_out must be a power of two, got {self.image_size}/{self.patch_out}"
            )
        return self

    @property
    def downsamples(self) -> int:
        return int(round(math.log2(self.image_size // self.patch_out)))

    def to_dict(self) -> dict:
        return asdict(self)


class BlurPool(nn.Module):
    """Low-pass with a 3x3 binomial filter, then subsample by ``stride``."""

    def __init__(self, channels: int, stride: int = 2):
        super().__init__()
        k = torch.tensor([1.0, 2.0, 1.0])
        k = torch.outer(k, k)
        k = k / k.sum()
        self.register_buffer("kernel", k.expand(channels, 1, 3, 3).contiguous(), persistent=False)
        self.stride = stride
        self.channels = channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.pad(x, (1, 1, 1, 1), mode="reflect")
        return F.conv2d(x, self.kernel, stride=self.stride, groups=self.channels)


def down_block(c_in: int, c_out: int, blurpool: bool, norm: bool = True) -> nn.Sequential:
    """Conv-norm-LeakyReLU halving the resolution.

    With blur-pool the conv runs at stride 1 and the subsampling happens
    after the low-pass; without it the conv itself has stride 2. Conv
    weight shapes are the same either way.
    """
    layers: list[nn.Module] = [
        nn.Conv2d(c_in, c_out, 3, stride=1 if blurpool else 2, padding=1)
    ]
    if norm:
        layers.append(nn.InstanceNorm2d(c_out, affine=True))
    layers.append(nn.LeakyReLU(0.2))
    if blurpool:
        layers.append(BlurPool(c_out))
    return nn.Sequential(*layers)


class UpBlock(nn.Module):
    """Nearest-neighbour upsample, concat skip, conv-norm-ReLU."""

    def __init__(self, c_in: int, c_skip: int, c_out: int):
        super().__init__()
        self.conv = nn.Sequential(
            nn.Conv2d(c_in + c_skip, c_out, 3, padding=1),
            nn.InstanceNorm2d(c_out, affine=True),
            nn.ReLU(),
        )

    def forward(self, x: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        return self.conv(torch.cat((x, skip), dim=1))


class UNetGenerator(nn.Module):
    """U-NET with ``encoder_blocks`` encoders and one fewer decoders.

    Encoder 1 works at full resolution; encoders 2..n each halve it, the
    last acting as an unmirrored bottleneck. Decoder k consumes the skip of
    encoder n-k, so the output comes back to input resolution.
    """

    def __init__(self, cfg: GeneratorConfig | None = None):
        super().__init__()
        self.cfg = cfg = (cfg or GeneratorConfig()).validate()
        widths = [min(cfg.base_channels * 2**i, cfg.max_channels) for i in range(cfg.encoder_blocks)]
        self.widths = widths
        self.stem = nn.Sequential(
            nn.Conv2d(cfg.in_channels, widths[0], 3, padding=1),
            nn.LeakyReLU(0.2),
        )
        self.encoders = nn.ModuleList(
            down_block(widths[i - 1], widths[i], cfg.use_blurpool) for i in range(1, cfg.encoder_blocks)
        )
        self.decoders = nn.ModuleList(
            UpBlock(widths[i + 1], widths[i], widths[i]) for i in reversed(range(cfg.decoder_blocks))
        )
        self.head = nn.Conv2d(widths[0], cfg.out_channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim == 3:
            return self.forward(x.unsqueeze(0))[0]
        m = self.cfg.size_multiple
        if x.shape[-1] % m or x.shape[-2] % m:
            raise ConfigError(f"generator input {tuple(x.shape[-2:])} must be divisible by {m}")
        if x.shape[1] != self.cfg.in_channels:
            raise InvalidArgumentError(f"expected {self.cfg.in_channels} channels, got {x.shape[1]}")
        skips = [self.stem(x)]
        for enc in self.encoders:
            skips.append(enc(skips[-1]))
        h = skips.pop()
        for dec in self.decoders:
            h = dec(h, skips.pop())
        return torch.tanh(self.head(h))


class PatchDiscriminator(nn.Module):
    """PatchGAN emitting a ``patch_out`` x ``patch_out`` map of raw logits."""

    def __init__(self, cfg: DiscriminatorConfig | None = None):
        super().__init__()
        self.cfg = cfg = (cfg or DiscriminatorConfig()).validate()
        layers: list[nn.Module] = []
        c_in, c = cfg.in_channels, cfg.base_channels
        for i in range(cfg.downsamples):
            c_out = min(cfg.base_channels * 2**i, cfg.max_channels)
            layers.append(down_block(c_in, c_out, cfg.use_blurpool, norm=i > 0))
            c_in = c = c_out
        c_out = min(c * 2, cfg.max_channels)
        layers += [
            nn.Conv2d(c, c_out, 3, padding=1),
            nn.InstanceNorm2d(c_out, affine=True),
            nn.LeakyReLU(0.2),
            nn.Conv2d(c_out, 1, 3, padding=1),
        ]
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim == 3:
            return self.forward(x.unsqueeze(0))[0]
        if tuple(x.shape[-2:]) != (self.cfg.image_size, self.cfg.image_size):
            raise InvalidArgumentError(
                f"discriminator expects {self.cfg.image_size}x{self.cfg.image_size}, got {tuple(x.shape[-2:])}"
            )
        return self.net(x)[:, 0]


def generate(g: UNetGenerator, x: torch.Tensor) -> torch.Tensor:
    return g(x)


def discriminate(d: PatchDiscriminator, x: torch.Tensor) -> torch.Tensor:
    return d(x)
