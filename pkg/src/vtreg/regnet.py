"""Registration network: a ViT localisation backbone plus an MLP regressor
that turns a (fixed, translated-moving) image pair into an affine theta."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn

from .errors import ConfigError, InvalidArgumentError
from .geometry import IDENTITY


@dataclass
class RegnetConfig:
    image_size: int = 256
    patch_size: int = 64
    vit_depth: int = 12
    embed_dim: int = 768
    num_heads: int = 12
    mlp_ratio: float = 4.0
    in_channels: int = 6
    mlp_widths: list[int] = field(default_factory=lambda: [1024, 512, 256])
    deeper_regressor: bool = False
    max_deviation: float = 0.5
    # Std of the final linear layer at init; small keeps theta near identity
    # while still letting gradients reach earlier layers.
    head_init_std: float = 1e-3

    def validate(self) -> "RegnetConfig":
        if self.patch_size <= 0 or self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.num_heads:
            raise ConfigError("embed_dim must be divisible by num_heads")
        if self.vit_depth < 1 or not self.mlp_widths:
            raise ConfigError("vit_depth must be >= 1 and mlp_widths non-empty")
        return self

    @property
    def token_count(self) -> int:
        return (self.image_size // self.patch_size) ** 2 + 1

    @property
    def regressor_in(self) -> int:
        return self.token_count * self.embed_dim

    def to_dict(self) -> dict:
        return asdict(self)


class PatchEmbedding(nn.Module):
    """Linear projection of non-overlapping p x p patches, with a class token
    prepended and learned positional embeddings added."""

    def __init__(self, image_size: int, patch_size: int, in_channels: int, embed_dim: int):
        super().__init__()
        if image_size % patch_size:
            raise ConfigError(f"image_size {image_size} not divisible by patch_size {patch_size}")
        self.image_size = image_size
        self.patch_size = patch_size
        self.num_patches = (image_size // patch_size) ** 2
        # A stride-p conv with a p x p kernel is exactly a per-patch linear map.
        self.proj = nn.Conv2d(in_channels, embed_dim, kernel_size=patch_size, stride=patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, embed_dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, self.num_patches + 1, embed_dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        if h % self.patch_size or w % self.patch_size:
            raise ConfigError(f"input {h}x{w} not divisible by patch size {self.patch_size}")
        if h != self.image_size or w != self.image_size:
            raise InvalidArgumentError(f"expected {self.image_size}x{self.image_size} input, got {h}x{w}")
        tokens = self.proj(x).flatten(2).transpose(1, 2)  # (N, P, D)
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        return torch.cat((cls, tokens), dim=1) + self.pos_embed


def patchify(image: torch.Tensor, patch_size: int, embed: PatchEmbedding | None = None) -> torch.Tensor:
    """Token sequence for ``image`` (C, H, W) or (N, C, H, W).

    With no ``embed`` module a fresh one is built for the image's size, which
    is mostly useful for inspecting token counts.
    """
    batched = image.ndim == 4
    x = image if batched else image.unsqueeze(0)
    h, w = x.shape[-2:]
    if h % patch_size or w % patch_size or h != w:
        raise ConfigError(f"{h}x{w} image cannot be split into {patch_size}px patches")
    if embed is None:
        embed = PatchEmbedding(h, patch_size, x.shape[1], embed_dim=64)
    tokens = embed(x)
    return tokens if batched else tokens[0]


class Block(nn.Module):
    """Pre-norm transformer encoder block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.norm1(x)
        x = x + self.attn(y, y, y, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class ViT(nn.Module):
    def __init__(self, cfg: RegnetConfig):
        super().__init__()
        self.embed = PatchEmbedding(cfg.image_size, cfg.patch_size, cfg.in_channels, cfg.embed_dim)
        self.blocks = nn.Sequential(
            *[Block(cfg.embed_dim, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.vit_depth)]
        )
        self.norm = nn.LayerNorm(cfg.embed_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.norm(self.blocks(self.embed(x)))


def build_regressor(cfg: RegnetConfig) -> nn.Sequential:
    """Linear-ReLU stack ending in Sigmoid-Linear(., 6).

    ``deeper_regressor`` inserts two extra Linear-ReLU layers at the
    narrowest width before the sigmoid.
    """
    widths = [cfg.regressor_in, *cfg.mlp_widths]
    layers: list[nn.Module] = []
    for i, (w_in, w_out) in enumerate(zip(widths[:-1], widths[1:])):
        layers.append(nn.Linear(w_in, w_out))
        if i < len(widths) - 2:
            layers.append(nn.ReLU())
    if cfg.deeper_regressor:
        for _ in range(2):
            layers += [nn.ReLU(), nn.Linear(widths[-1], widths[-1])]
    layers += [nn.Sigmoid(), nn.Linear(widths[-1], 6)]
    return nn.Sequential(*layers)


class RegistrationNet(nn.Module):
    """ViT + MLP localisation network emitting theta of shape (N, 6).

    The raw regressor output is mapped as ``identity + dev * tanh(raw)`` and
    then clamped to [-1, 1], so theta starts near identity, each entry moves
    at most ``max_deviation`` away from it, and every entry stays in [-1, 1].
    A consequence is that the diagonal never exceeds 1: the sampled region
    can shrink (zoom in) but not grow beyond the frame.
    """

    def __init__(self, cfg: RegnetConfig | None = None):
        super().__init__()
        self.cfg = (cfg or RegnetConfig()).validate()
        self.vit = ViT(self.cfg)
        self.regressor = build_regressor(self.cfg)
        head = self.regressor[-1]
        nn.init.normal_(head.weight, std=self.cfg.head_init_std)
        nn.init.zeros_(head.bias)
        self.register_buffer("identity", torch.tensor(IDENTITY), persistent=False)

    def forward(self, a: torch.Tensor, a_hat1: torch.Tensor) -> torch.Tensor:
        if a.shape != a_hat1.shape:
            raise InvalidArgumentError(f"pair shape mismatch: {tuple(a.shape)} vs {tuple(a_hat1.shape)}")
        if a.ndim == 3:
            return self.forward(a.unsqueeze(0), a_hat1.unsqueeze(0))[0]
        if a.shape[1] * 2 != self.cfg.in_channels:
            raise InvalidArgumentError(
                f"expected {self.cfg.in_channels // 2}-channel images, got {a.shape[1]}"
            )
        tokens = self.vit(torch.cat((a, a_hat1), dim=1))
        raw = self.regressor(tokens.flatten(1))
        theta = self.identity + self.cfg.max_deviation * torch.tanh(raw)
        # Straight-through clamp: the diagonal starts exactly at the bound,
        # and a plain clamp would zero its gradient there.
        return theta + (theta.clamp(-1.0, 1.0) - theta).detach()


def regress_theta(a: torch.Tensor, a_hat1: torch.Tensor, net: RegistrationNet) -> torch.Tensor:
    return net(a, a_hat1)
