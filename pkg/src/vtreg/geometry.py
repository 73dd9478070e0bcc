"""Differentiable affine warping.

Coordinate convention (align-corners): pixel centres map onto [-1, 1]
inclusive, so column ``j`` of a width-``W`` image sits at
``x = -1 + 2 j / (W - 1)`` and row ``i`` at ``y = -1 + 2 i / (H - 1)``.
A theta is the row-major 2x3 matrix ``[[a, b, tx], [c, d, ty]]`` mapping an
output pixel's normalised coordinate to the source coordinate it samples.
Samples falling outside the source are zero (mid-grey for [-1, 1] images).

All functions accept a single item or a leading batch dimension.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InvalidArgumentError, InvalidParameterError, SingularMatrixError

IDENTITY = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0)


def identity_theta(batch: int | None = None, dtype=torch.float32) -> torch.Tensor:
    theta = torch.tensor(IDENTITY, dtype=dtype)
    if batch is None:
        return theta
    return theta.expand(batch, 6).clone()


def as_theta(theta) -> torch.Tensor:
    """Coerce ``theta`` to a float tensor of shape (6,) or (N, 6)."""
    if not isinstance(theta, torch.Tensor):
        theta = torch.as_tensor(np.asarray(theta, dtype=np.float64), dtype=torch.float32)
    if theta.shape[-2:] == (2, 3):
        theta = theta.reshape(*theta.shape[:-2], 6)
    if theta.ndim not in (1, 2) or theta.shape[-1] != 6:
        raise InvalidArgumentError(f"theta must have 6 entries per item, got shape {tuple(theta.shape)}")
    if not torch.isfinite(theta).all():
        raise InvalidParameterError("theta contains non-finite values")
    return theta


def normalized_mesh(height: int, width: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """Identity sampling grid of shape (H, W, 2) holding (x, y) per pixel."""
    ys = torch.linspace(-1.0, 1.0, height, dtype=dtype, device=device)
    xs = torch.linspace(-1.0, 1.0, width, dtype=dtype, device=device)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack((gx, gy), dim=-1)


def theta_to_grid(theta, height: int, width: int) -> torch.Tensor:
    """Sampling grid for ``theta``: (H, W, 2), or (N, H, W, 2) for a batch.

    The grid is affine in theta, so gradients flow back to theta exactly.
    """
    if height < 2 or width < 2:
        raise InvalidArgumentError("grid needs height and width >= 2")
    theta = as_theta(theta)
    mat = theta.reshape(*theta.shape[:-1], 2, 3)
    mesh = normalized_mesh(height, width, dtype=theta.dtype, device=theta.device)
    homog = torch.cat((mesh, torch.ones_like(mesh[..., :1])), dim=-1)  # (H, W, 3)
    if mat.ndim == 2:
        return torch.einsum("hwk,rk->hwr", homog, mat)
    return torch.einsum("hwk,nrk->nhwr", homog, mat)


def out_of_bounds(grid: torch.Tensor, tol: float = 1e-6) -> torch.Tensor:
    """Boolean mask (..., H, W) of grid samples that fall outside [-1, 1]."""
    return (grid.abs() > 1.0 + tol).any(dim=-1)


def warp(image: torch.Tensor, grid: torch.Tensor) -> torch.Tensor:
    """Bilinearly resample ``image`` at ``grid`` with zero padding.

    image: (C, H, W) with grid (H', W', 2), or (N, C, H, W) with grid
    (N, H', W', 2). Output has the grid's spatial shape.
    """
    if not isinstance(image, torch.Tensor):
        image = torch.as_tensor(image, dtype=torch.float32)
    single = image.ndim == 3
    if single:
        if grid.ndim != 3:
            raise InvalidArgumentError("single image needs a (H, W, 2) grid")
        image, grid = image.unsqueeze(0), grid.unsqueeze(0)
    if image.ndim != 4 or grid.ndim != 4 or grid.shape[-1] != 2:
        raise InvalidArgumentError(
            f"bad shapes for warp: image {tuple(image.shape)}, grid {tuple(grid.shape)}"
        )
    if grid.shape[0] != image.shape[0]:
        raise InvalidArgumentError(
            f"batch mismatch: {image.shape[0]} images vs {grid.shape[0]} grids"
        )
    out = F.grid_sample(
        image, grid.to(image.dtype), mode="bilinear", padding_mode="zeros", align_corners=True
    )
    return out[0] if single else out


def warp_affine(image: torch.Tensor, theta) -> torch.Tensor:
    """Shorthand for ``warp(image, theta_to_grid(theta, H, W))``.

    A single theta is broadcast over a batched image.
    """
    h, w = image.shape[-2:]
    theta = as_theta(theta)
    if image.ndim == 4 and theta.ndim == 1:
        theta = theta.expand(image.shape[0], 6)
    return warp(image, theta_to_grid(theta, h, w))


def _to_h3(theta: torch.Tensor) -> torch.Tensor:
    mat = theta.reshape(*theta.shape[:-1], 2, 3)
    bottom = torch.zeros(*theta.shape[:-1], 1, 3, dtype=theta.dtype, device=theta.device)
    bottom[..., 0, 2] = 1.0
    return torch.cat((mat, bottom), dim=-2)


def compose_affine(a, b) -> torch.Tensor:
    """Coordinate map "apply ``a``, then ``b``": the product ``B @ A`` of the
    homogeneous extensions, returned as a 6-vector.

    Warping an image by ``t1`` and then by ``t2`` equals a single warp by
    ``compose_affine(t2, t1)``.
    """
    a, b = as_theta(a), as_theta(b)
    prod = _to_h3(b) @ _to_h3(a)
    return prod[..., :2, :].reshape(*prod.shape[:-2], 6)


def invert_affine(theta, eps: float = 1e-8) -> torch.Tensor:
    theta = as_theta(theta)
    a, b, tx, c, d, ty = theta.unbind(-1)
    det = a * d - b * c
    if (det.abs() <= eps).any():
        raise SingularMatrixError("affine linear part is singular")
    ia, ib, ic, id_ = d / det, -b / det, -c / det, a / det
    itx = -(ia * tx + ib * ty)
    ity = -(ic * tx + id_ * ty)
    return torch.stack((ia, ib, itx, ic, id_, ity), dim=-1)


def corner_displacement(theta_a, theta_b, height: int, width: int | None = None) -> torch.Tensor:
    """Mean displacement, in pixels, of the four frame corners under two thetas.

    Returns one value per batch item (or a scalar for single thetas).
    """
    width = height if width is None else width
    ta, tb = as_theta(theta_a).double(), as_theta(theta_b).double()
    corners = torch.tensor(
        [[-1.0, -1.0, 1.0], [1.0, -1.0, 1.0], [-1.0, 1.0, 1.0], [1.0, 1.0, 1.0]], dtype=torch.float64
    )
    pa = corners @ ta.reshape(*ta.shape[:-1], 2, 3).transpose(-1, -2)
    pb = corners @ tb.reshape(*tb.shape[:-1], 2, 3).transpose(-1, -2)
    scale = torch.tensor([(width - 1) / 2.0, (height - 1) / 2.0], dtype=torch.float64)
    return ((pa - pb) * scale).norm(dim=-1).mean(dim=-1)


def affine_from_params(
    rotation_deg: float = 0.0,
    scale: float = 1.0,
    tx: float = 0.0,
    ty: float = 0.0,
    shear: float = 0.0,
) -> torch.Tensor:
    """Theta for ``scale * R(rotation) @ [[1, shear], [0, 1]]`` plus translation."""
    r = math.radians(rotation_deg)
    cos, sin = math.cos(r), math.sin(r)
    a, b = scale * cos, scale * (cos * shear - sin)
    c, d = scale * sin, scale * (sin * shear + cos)
    return torch.tensor([a, b, tx, c, d, ty], dtype=torch.float32)
