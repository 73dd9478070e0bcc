"""Training losses for the translation GANs and the spatial transformer."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, InvalidArgumentError
from .imageops import dilate, erode, to_luminance

TRIPLET_MARGIN = 1.0


def _same_shape(*xs: torch.Tensor) -> None:
    shape = xs[0].shape
    for x in xs[1:]:
        if x.shape != shape:
            raise InvalidArgumentError(f"shape mismatch: {tuple(shape)} vs {tuple(x.shape)}")


def _batched(x: torch.Tensor) -> torch.Tensor:
    return x.unsqueeze(0) if x.ndim == 3 else x


# --------------------------------------------------------------------------
# Perceptual loss


# VGG-16 conv widths with "M" for 2x2 max-pool; taps are the last ReLU of each stage.
VGG16_LAYOUT = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512]
LIGHT_LAYOUT = [8, "M", 16, "M", 32]


class FeatureExtractor(nn.Module):
    """Fixed VGG-style conv stack with per-tap linear calibration.

    ``kind="vgg16"`` builds the 16-layer VGG feature stack; with
    ``pretrained=True`` ImageNet weights are pulled through torchvision.
    ``kind="light"`` is a small randomly initialised stack, seeded so that
    tests and desk-scale training are hermetic and repeatable.

    The calibration is one non-negative weight per channel per tap,
    initialised to 1/C (channel mean). All parameters are frozen.
    """

    def __init__(self, kind: str = "light", pretrained: bool = False, seed: int = 0):
        super().__init__()
        if kind not in ("light", "vgg16"):
            raise ConfigError(f"unknown feature extractor {kind!r}")
        layout = VGG16_LAYOUT if kind == "vgg16" else LIGHT_LAYOUT
        gen = torch.Generator().manual_seed(seed)
        stages: list[nn.Sequential] = []
        current: list[nn.Module] = []
        c_in = 3
        for item in layout:
            if item == "M":
                stages.append(nn.Sequential(*current))
                current = [nn.MaxPool2d(2)]
                continue
            conv = nn.Conv2d(c_in, item, 3, padding=1)
            with torch.no_grad():
                nn.init.kaiming_normal_(conv.weight, generator=gen)
                conv.bias.zero_()
            current += [conv, nn.ReLU()]
            c_in = item
        stages.append(nn.Sequential(*current))
        self.stages = nn.ModuleList(stages)
        self.kind = kind
        if pretrained:
            if kind != "vgg16":
                raise ConfigError("pretrained weights exist only for kind='vgg16'")
            self._load_torchvision_vgg16()
        widths = [s[-2].out_channels for s in self.stages]
        self.calibration = nn.ParameterList(nn.Parameter(torch.full((c,), 1.0 / c)) for c in widths)
        if kind == "vgg16":
            self.register_buffer("shift", torch.tensor([-0.030, -0.088, -0.188]).view(1, 3, 1, 1))
            self.register_buffer("scale", torch.tensor([0.458, 0.448, 0.450]).view(1, 3, 1, 1))
        else:
            self.register_buffer("shift", torch.zeros(1, 3, 1, 1))
            self.register_buffer("scale", torch.ones(1, 3, 1, 1))
        self.requires_grad_(False)
        self.eval()

    def _load_torchvision_vgg16(self) -> None:
        from torchvision.models import VGG16_Weights, vgg16

        src = [m for m in vgg16(weights=VGG16_Weights.IMAGENET1K_V1).features if isinstance(m, nn.Conv2d)]
        dst = [m for m in self.modules() if isinstance(m, nn.Conv2d)]
        with torch.no_grad():
            for s, d in zip(src, dst):
                d.weight.copy_(s.weight)
                d.bias.copy_(s.bias)

    def train(self, mode: bool = True):
        # Always behaves as a fixed function.
        return super().train(False)

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        x = (_batched(x) - self.shift) / self.scale
        taps = []
        for stage in self.stages:
            x = stage(x)
            taps.append(x)
        return taps

    def distance(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        """Per-sample calibrated feature distance, shape (N,)."""
        _same_shape(x, y)
        total = 0.0
        for fx, fy, w in zip(self.features(x), self.features(y), self.calibration):
            fx = fx * torch.rsqrt(fx.square().sum(dim=1, keepdim=True) + 1e-20)
            fy = fy * torch.rsqrt(fy.square().sum(dim=1, keepdim=True) + 1e-20)
            diff = (fx - fy) ** 2 * w.clamp_min(0).view(1, -1, 1, 1)
            total = total + diff.sum(dim=1).mean(dim=(1, 2))
        return total


def perceptual_loss(
    b_hat: torch.Tensor,
    b: torch.Tensor,
    a: torch.Tensor,
    a_hat2: torch.Tensor,
    feat: FeatureExtractor,
) -> torch.Tensor:
    """Calibrated feature distance of (b_hat, b) plus that of (a, a_hat2), batch mean."""
    _same_shape(b_hat, b, a, a_hat2)
    return (feat.distance(b_hat, b) + feat.distance(a, a_hat2)).mean()


# --------------------------------------------------------------------------
# Reconstruction and morphological losses


def recon_loss(a: torch.Tensor, a_hat2: torch.Tensor) -> torch.Tensor:
    _same_shape(a, a_hat2)
    return (a - a_hat2).abs().mean()


def morph_gradient(image: torch.Tensor) -> torch.Tensor:
    """3x3 grey dilation minus erosion of the luminance; one channel out."""
    lum = to_luminance(image) if image.ndim >= 3 else image
    return dilate(lum) - erode(lum)


def mean_sq_distance(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Per-sample mean squared distance, shape (N,)."""
    return ((_batched(x) - _batched(y)) ** 2).flatten(1).mean(dim=1)


def triplet_hinge(d_pos: torch.Tensor, d_neg: torch.Tensor, margin: float = TRIPLET_MARGIN) -> torch.Tensor:
    return torch.clamp(d_pos - d_neg + margin, min=0.0).mean()


def morph_triplet_loss(b_r: torch.Tensor, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pull the registered image's edges toward the fixed image's edges and
    away from the unregistered moving image's edges."""
    _same_shape(b_r, a, b)
    g_r, g_a, g_b = morph_gradient(b_r), morph_gradient(a), morph_gradient(b)
    return triplet_hinge(mean_sq_distance(g_r, g_a), mean_sq_distance(g_r, g_b))


# --------------------------------------------------------------------------
# Fourier loss


def fourier_spectra(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Amplitude and phase of the orthonormal 2-D DFT of the luminance."""
    spec = torch.fft.fft2(to_luminance(_batched(x)), norm="ortho")
    return spec.abs(), torch.angle(spec)


def fourier_terms(a: torch.Tensor, a_hat1: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """(amplitude L1, phase L1), each a mean over frequency bins and batch.

    Phase differences are raw angle differences with no wrap-around, so two
    phases either side of +-pi count as far apart.
    """
    _same_shape(a, a_hat1)
    amp_a, pha_a = fourier_spectra(a)
    amp_b, pha_b = fourier_spectra(a_hat1)
    return (amp_a - amp_b).abs().mean(), (pha_a - pha_b).abs().mean()


def fourier_loss(a: torch.Tensor, a_hat1: torch.Tensor) -> torch.Tensor:
    amp, pha = fourier_terms(a, a_hat1)
    return amp + pha


# --------------------------------------------------------------------------
# Adversarial loss


def _bce(logits: torch.Tensor, target: float) -> torch.Tensor:
    return F.binary_cross_entropy_with_logits(logits, torch.full_like(logits, target))


def relativistic_adv_losses(
    d_real: torch.Tensor, d_fake: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Relativistic-average GAN losses on raw logit maps.

    Returns ``(adv_g, adv_d)``. The discriminator wants real logits above the
    mean fake logit and fake logits below the mean real logit; its loss is the
    average of the two sides. The generator loss flips both targets.
    """
    _same_shape(d_real, d_fake)
    rel_real = d_real - d_fake.mean()
    rel_fake = d_fake - d_real.mean()
    adv_d = 0.5 * (_bce(rel_real, 1.0) + _bce(rel_fake, 0.0))
    adv_g = 0.5 * (_bce(rel_real, 0.0) + _bce(rel_fake, 1.0))
    return adv_g, adv_d


# --------------------------------------------------------------------------
# Aggregation


@dataclass
class LossWeights:
    perc: float = 1.0
    recon: float = 1.0
    morph: float = 1.0
    fourier: float = 1.0
    adv: float = 1.0

    def to_dict(self) -> dict:
        return asdict(self)


COMPONENTS = ("perc", "recon", "morph", "fourier", "adv_g", "adv_d", "total_g")


@dataclass
class LossBundle:
    perc: float = 0.0
    recon: float = 0.0
    morph: float = 0.0
    fourier: float = 0.0
    adv_g: float = 0.0
    adv_d: float = 0.0
    total_g: float = 0.0
    weights: LossWeights = field(default_factory=LossWeights)

    def components(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in COMPONENTS}

    def to_dict(self) -> dict:
        out = self.components()
        out["weights"] = self.weights.to_dict()
        return out

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in self.components().values())


def total_generator_loss(
    adv_g, perc, recon, morph, fourier=0.0, weights: LossWeights | None = None
):
    """Weighted generator objective; works on tensors or plain floats."""
    w = weights or LossWeights()
    return w.adv * adv_g + w.perc * perc + w.recon * recon + w.morph * morph + w.fourier * fourier
