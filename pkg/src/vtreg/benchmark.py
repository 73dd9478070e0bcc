"""Synthetic registration-recovery benchmark.

Trains the full four-flow system on phantom pairs with known misalignment
and scores the recovered thetas against the true inverse warps.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import Config
from .dataio import SyntheticSet, perturb
from .errors import UndefinedStatisticError
from .geometry import corner_displacement, identity_theta, invert_affine
from .losses import LossBundle
from .metrics import edge_metrics
from .trainer import Nets, Trainer, predict

log = logging.getLogger(__name__)


def corner_errors(theta_pred: torch.Tensor, theta_true: torch.Tensor, size: int) -> torch.Tensor:
    """Per-pair mean corner error (px) of a predicted registration against
    the warp that exactly undoes ``theta_true``."""
    return corner_displacement(theta_pred, invert_affine(theta_true), size)


def baseline_errors(theta_true: torch.Tensor, size: int) -> torch.Tensor:
    return corner_errors(identity_theta(theta_true.shape[0]), theta_true, size)


def mean_edge_ncc(fixed: torch.Tensor, moving: torch.Tensor) -> float:
    vals = []
    for a, b in zip(fixed, moving):
        try:
            vals.append(edge_metrics(a, b)[1])
        except UndefinedStatisticError:
            continue
    return float(np.mean(vals)) if vals else float("nan")


@dataclass
class RecoveryScore:
    baseline_error: float
    error: float
    ncc_unregistered: float
    ncc_registered: float
    thetas: torch.Tensor = field(repr=False)

    @property
    def reduction(self) -> float:
        """Fractional corner-error reduction relative to the identity baseline."""
        return 1.0 - self.error / self.baseline_error


def score_recovery(nets: Nets, data: SyntheticSet, fixed=None, moving=None) -> RecoveryScore:
    """Predict thetas for ``data`` (optionally on substituted inputs) and score them."""
    fixed = data.fixed if fixed is None else fixed
    moving = data.moving if moving is None else moving
    size = data.fixed.shape[-1]
    thetas, registered = predict(nets, fixed, moving)
    return RecoveryScore(
        baseline_error=float(baseline_errors(data.theta_true, size).mean()),
        error=float(corner_errors(thetas, data.theta_true, size).mean()),
        ncc_unregistered=mean_edge_ncc(fixed, moving),
        ncc_registered=mean_edge_ncc(fixed, registered),
        thetas=thetas,
    )


@dataclass
class BenchmarkRun:
    trainer: Trainer
    history: list[LossBundle]
    score: RecoveryScore
    curve: list[tuple[int, float]]


def run_benchmark(cfg: Config, data: SyntheticSet, steps: int, run_dir=None, eval_every: int = 0) -> BenchmarkRun:
    """Train on ``data`` for ``steps`` updates and score the result.

    With ``eval_every`` > 0 the mean corner error is also recorded along
    the way (``curve``).
    """
    trainer = Trainer(cfg)
    curve: list[tuple[int, float]] = []
    size = data.fixed.shape[-1]

    def track(tr: Trainer, bundle: LossBundle) -> None:
        if eval_every and tr.step % eval_every == 0:
            thetas, _ = predict(tr.nets, data.fixed, data.moving)
            err = float(corner_errors(thetas, data.theta_true, size).mean())
            curve.append((tr.step, err))
            log.info("step %d corner error %.3f px  total_g %.4f", tr.step, err, bundle.total_g)

    history = trainer.fit(data.fixed, data.moving, run_dir=run_dir, steps=steps, callback=track)
    return BenchmarkRun(trainer, history, score_recovery(trainer.nets, data), curve)


def perturbed_inputs(data: SyntheticSet, kind: str, seed: int = 0):
    """(fixed, moving) with a robustness perturbation applied per pair.

    Vertical flips are applied to both images so the pair stays
    consistent; erasures hit only the named image.
    """
    fixed, moving = data.fixed.clone(), data.moving.clone()
    for i in range(len(data)):
        if kind == "vflip":
            fixed[i], moving[i] = perturb(fixed[i], kind), perturb(moving[i], kind)
        elif kind == "erase_visible":
            fixed[i] = perturb(fixed[i], kind, seed + i)
        elif kind == "erase_thermal":
            moving[i] = perturb(moving[i], kind, seed + i)
        else:
            perturb(fixed[i], kind)  # raises for unknown kinds
    return fixed, moving


def flip_theta(theta: torch.Tensor) -> torch.Tensor:
    """Conjugate thetas by a vertical flip (y -> -y): negates b, c and ty."""
    out = theta.clone()
    out[..., 1] = -out[..., 1]
    out[..., 3] = -out[..., 3]
    out[..., 5] = -out[..., 5]
    return out
