"""Thermal vessel-map extraction and identity comparison.

Pipeline: Perona-Malik diffusion -> CLAHE -> white top-hat, on unit-range
([0, 1]) single-channel images, then PSNR between two vessel maps.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError
from .metrics import psnr


@dataclass
class VesselConfig:
    diffusion_iters: int = 20
    kappa: float = 30.0  # edge threshold on a 0-255 scale
    lam: float = 0.2
    conductance: str = "exp"  # or "rational"
    clahe_clip: float = 2.0
    clahe_tiles: int = 8
    tophat_kernel: int = 11

    def validate(self) -> "VesselConfig":
        if not 0.0 < self.lam <= 0.25:
            raise ConfigError(f"lambda must lie in (0, 0.25] for a stable explicit scheme, got {self.lam}")
        if self.tophat_kernel < 3 or self.tophat_kernel % 2 == 0:
            raise ConfigError(f"top-hat kernel must be odd and >= 3, got {self.tophat_kernel}")
        if self.conductance not in ("exp", "rational"):
            raise ConfigError(f"unknown conductance {self.conductance!r}")
        if self.kappa <= 0 or self.diffusion_iters < 0:
            raise ConfigError("kappa must be positive and diffusion_iters non-negative")
        if self.clahe_clip <= 0 or self.clahe_tiles < 1:
            raise ConfigError("CLAHE clip must be positive and tiles >= 1")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def _plane(image) -> np.ndarray:
    if hasattr(image, "detach"):
        image = image.detach().cpu().numpy()
    arr = np.asarray(image, dtype=np.float64)
    while arr.ndim > 2 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise ConfigError(f"vessel operations need a single-channel image, got shape {arr.shape}")
    return arr


def anisotropic_diffusion(image, config: VesselConfig | None = None) -> np.ndarray:
    """Explicit Perona-Malik diffusion with 4-neighbour differences.

    Fluxes across the frame edge are zero (reflective boundary), so the
    image mean is conserved and, with lambda <= 0.25, every update is a
    convex combination of neighbours (no new extrema).
    """
    cfg = (config or VesselConfig()).validate()
    u = _plane(image).copy()
    k2 = (cfg.kappa / 255.0) ** 2
    for _ in range(cfg.diffusion_iters):
        # Differences across each vertical and horizontal pixel interface.
        dv = np.diff(u, axis=0)
        dh = np.diff(u, axis=1)
        if cfg.conductance == "exp":
            fv, fh = np.exp(-(dv * dv) / k2) * dv, np.exp(-(dh * dh) / k2) * dh
        else:
            fv, fh = dv / (1.0 + dv * dv / k2), dh / (1.0 + dh * dh / k2)
        upd = np.zeros_like(u)
        upd[:-1, :] += fv
        upd[1:, :] -= fv
        upd[:, :-1] += fh
        upd[:, 1:] -= fh
        u += cfg.lam * upd
    return u


def clahe(image, clip: float = 2.0, tiles: int = 8, nbins: int = 256) -> np.ndarray:
    """Contrast-limited adaptive histogram equalisation of a [0, 1] image.

    ``clip`` is relative to a flat histogram (clip * pixels_per_tile / nbins
    counts per bin); clipped excess is spread evenly over all bins. Tile
    mappings are blended bilinearly between tile centres. A constant image
    is returned unchanged.
    """
    img = np.clip(_plane(image), 0.0, 1.0)
    h, w = img.shape
    if tiles > h or tiles > w:
        raise ConfigError(f"{tiles}x{tiles} tiles do not fit a {h}x{w} image")
    if clip <= 0:
        raise ConfigError("clip limit must be positive")
    if img.max() == img.min():
        return img.copy()

    th, tw = math.ceil(h / tiles), math.ceil(w / tiles)
    padded = np.pad(img, ((0, th * tiles - h), (0, tw * tiles - w)), mode="reflect")
    q = np.clip(np.rint(padded * (nbins - 1)), 0, nbins - 1).astype(np.int64)

    blocks = q.reshape(tiles, th, tiles, tw).transpose(0, 2, 1, 3).reshape(tiles, tiles, th * tw)
    hist = np.zeros((tiles, tiles, nbins))
    for i in range(tiles):
        for j in range(tiles):
            hist[i, j] = np.bincount(blocks[i, j], minlength=nbins)
    limit = max(clip * th * tw / nbins, 1.0)
    excess = np.clip(hist - limit, 0.0, None).sum(axis=-1, keepdims=True)
    hist = np.minimum(hist, limit) + excess / nbins
    lut = np.cumsum(hist, axis=-1) / (th * tw)  # (tiles, tiles, nbins), ends at 1

    # Bilinear blend between the four surrounding tile centres.
    qi = np.clip(np.rint(img * (nbins - 1)), 0, nbins - 1).astype(np.int64)
    ty = (np.arange(h) + 0.5) / th - 0.5
    tx = (np.arange(w) + 0.5) / tw - 0.5
    y0 = np.clip(np.floor(ty).astype(int), 0, tiles - 1)
    x0 = np.clip(np.floor(tx).astype(int), 0, tiles - 1)
    y1, x1 = np.minimum(y0 + 1, tiles - 1), np.minimum(x0 + 1, tiles - 1)
    wy = np.clip(ty - y0, 0.0, 1.0)[:, None]
    wx = np.clip(tx - x0, 0.0, 1.0)[None, :]
    Y0, X0 = np.meshgrid(y0, x0, indexing="ij")
    Y1, X1 = np.meshgrid(y1, x1, indexing="ij")
    top = (1 - wx) * lut[Y0, X0, qi] + wx * lut[Y0, X1, qi]
    bottom = (1 - wx) * lut[Y1, X0, qi] + wx * lut[Y1, X1, qi]
    return np.clip((1 - wy) * top + wy * bottom, 0.0, 1.0)


def opening(image, kernel: int) -> np.ndarray:
    return ndimage.grey_opening(_plane(image), size=(kernel, kernel), mode="reflect")


def top_hat(image, kernel: int = 11) -> np.ndarray:
    """White top-hat: image minus its opening by a kernel x kernel square."""
    if kernel < 3 or kernel % 2 == 0:
        raise ConfigError(f"top-hat kernel must be odd and >= 3, got {kernel}")
    img = _plane(image)
    return img - opening(img, kernel)


def thermal_to_unit(thermal) -> np.ndarray:
    """[-1, 1] thermal image (1 or 3 channels) to a [0, 1] luminance plane."""
    if hasattr(thermal, "detach"):
        thermal = thermal.detach().cpu().numpy()
    arr = np.asarray(thermal, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[0] == 3:
        arr = np.tensordot(np.array([0.299, 0.587, 0.114]), arr, axes=1)
    return np.clip((_plane(arr) + 1.0) * 0.5, 0.0, 1.0)


def vessel_map(thermal, config: VesselConfig | None = None) -> np.ndarray:
    """Vessel map of a [-1, 1] thermal image, normalised to [0, 1]."""
    cfg = (config or VesselConfig()).validate()
    u = anisotropic_diffusion(thermal_to_unit(thermal), cfg)
    u = clahe(u, cfg.clahe_clip, cfg.clahe_tiles)
    v = top_hat(u, cfg.tophat_kernel)
    peak = v.max()
    return v / peak if peak > 0 else v


def identity_similarity(thermal_a, thermal_b, config: VesselConfig | None = None) -> float:
    """PSNR (dB) between the vessel maps of two thermal images."""
    return psnr(vessel_map(thermal_a, config), vessel_map(thermal_b, config), data_range=1.0)
