"""Small tensor helpers shared by losses, metrics and the vessel pipeline."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

LUMA = (0.299, 0.587, 0.114)


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x), dtype=torch.float32)


def to_luminance(x: torch.Tensor) -> torch.Tensor:
    """Collapse the channel axis to one luminance channel.

    Accepts (C, H, W) or (N, C, H, W); the channel axis is kept (size 1).
    """
    cdim = x.ndim - 3
    if x.shape[cdim] == 1:
        return x
    if x.shape[cdim] != 3:
        raise ValueError(f"expected 1 or 3 channels, got {x.shape[cdim]}")
    w = torch.tensor(LUMA, dtype=x.dtype, device=x.device).view(3, 1, 1)
    return (x * w).sum(dim=cdim, keepdim=True)


def _as_batch(x: torch.Tensor) -> tuple[torch.Tensor, int]:
    """Reshape (H, W), (C, H, W) or (N, C, H, W) to 4-D; return original ndim."""
    nd = x.ndim
    if nd == 2:
        return x[None, None], nd
    if nd == 3:
        return x[None], nd
    return x, nd


def _restore(x: torch.Tensor, nd: int) -> torch.Tensor:
    if nd == 2:
        return x[0, 0]
    if nd == 3:
        return x[0]
    return x


def dilate(x: torch.Tensor, size: int = 3) -> torch.Tensor:
    """Grey dilation with a flat ``size`` x ``size`` square; the frame edge
    only considers in-image neighbours."""
    x4, nd = _as_batch(x)
    return _restore(F.max_pool2d(x4, size, stride=1, padding=size // 2), nd)


def erode(x: torch.Tensor, size: int = 3) -> torch.Tensor:
    return -dilate(-x, size)


def to_unit(x):
    """Map [-1, 1] to [0, 1]."""
    return (x + 1.0) * 0.5


def from_unit(x):
    return x * 2.0 - 1.0
