"""Joint training of the two translation GANs and the spatial transformer.

Four flows per batch, with ``a`` the fixed image and ``b`` the moving one:

    b_hat  = G1(a)
    a_hat1 = G2(b)
    theta  = STN(a, a_hat1);  b_r = warp(b, theta)
    a_hat2 = G2(b_r)
"""

from __future__ import annotations

import json
import logging
import math
import random
from contextlib import nullcontext
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .config import Config
from .dataio import (
    PairManifest,
    PairRecord,
    batch_order,
    load_pair,
    orient,
    write_image,
    write_manifest,
    write_theta_table,
)
from .errors import ConfigError, DataError, InvalidParameterError, NumericalAbort
from .geometry import theta_to_grid, warp
from .losses import (
    FeatureExtractor,
    LossBundle,
    fourier_loss,
    morph_triplet_loss,
    perceptual_loss,
    recon_loss,
    relativistic_adv_losses,
    total_generator_loss,
)
from .regnet import RegistrationNet
from .transnets import PatchDiscriminator, UNetGenerator

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "vtreg-checkpoint"
CHECKPOINT_VERSION = 1


def seed_everything(seed: int, deterministic: bool = True) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)


class Nets(nn.Module):
    def __init__(self, cfg: Config):
        super().__init__()
        self.g1 = UNetGenerator(cfg.generator)
        self.g2 = UNetGenerator(cfg.generator)
        self.d1 = PatchDiscriminator(cfg.discriminator)
        self.d2 = PatchDiscriminator(cfg.discriminator)
        self.stn = RegistrationNet(cfg.regnet)


@dataclass
class FlowOutputs:
    b_hat: torch.Tensor
    a_hat1: torch.Tensor
    b_r: torch.Tensor
    a_hat2: torch.Tensor
    theta: torch.Tensor


def forward_flows(a: torch.Tensor, b: torch.Tensor, nets: Nets) -> FlowOutputs:
    if a.shape != b.shape:
        raise ConfigError(f"fixed/moving shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    b_hat = nets.g1(a)
    a_hat1 = nets.g2(b)
    theta = nets.stn(a, a_hat1)
    b_r = warp(b, theta_to_grid(theta, b.shape[-2], b.shape[-1]))
    a_hat2 = nets.g2(b_r)
    return FlowOutputs(b_hat, a_hat1, b_r, a_hat2, theta)


class Trainer:
    """Owns the networks, optimisers and the step counter of one run."""

    def __init__(self, cfg: Config, nets: Nets | None = None):
        self.cfg = cfg.validate()
        tc = cfg.train
        seed_everything(tc.seed, tc.deterministic)
        self.nets = nets if nets is not None else Nets(cfg)
        self.feat = FeatureExtractor(cfg.loss.features, cfg.loss.pretrained_features, cfg.loss.feature_seed)
        betas = (tc.beta1, tc.beta2)
        g_params = list(self.nets.g1.parameters()) + list(self.nets.g2.parameters())
        d_params = list(self.nets.d1.parameters()) + list(self.nets.d2.parameters())
        self.opt_g = torch.optim.Adam(g_params, lr=tc.lr_g, betas=betas)
        self.opt_d = torch.optim.Adam(d_params, lr=tc.lr_d, betas=betas)
        self.opt_stn = torch.optim.Adam(self.nets.stn.parameters(), lr=tc.lr_stn, betas=betas)
        self.step = 0
        self.epoch = 0

    def _autocast(self):
        tc = self.cfg.train
        if tc.mixed_precision and not tc.deterministic:
            return torch.autocast("cpu", dtype=torch.bfloat16)
        return nullcontext()

    def _guard(self, parts: dict, a, b, theta) -> None:
        limit = self.cfg.train.explode_threshold
        vals = {k: float(v.detach()) for k, v in parts.items()}
        bad = {k: v for k, v in vals.items() if not math.isfinite(v) or abs(v) > limit}
        if bad:
            snapshot = {
                "step": self.step,
                "losses": vals,
                "theta": theta.detach().cpu(),
                "a": a.detach().cpu(),
                "b": b.detach().cpu(),
            }
            raise NumericalAbort(f"loss guard tripped at step {self.step}: {bad}", snapshot)

    def train_step(self, a: torch.Tensor, b: torch.Tensor) -> LossBundle:
        """One discriminator update followed by one generator+STN update."""
        nets, cfg = self.nets, self.cfg
        w = cfg.loss.weights
        nets.train()
        with self._autocast():
            try:
                flows = forward_flows(a, b, nets)
            except InvalidParameterError as exc:
                theta = nets.stn(a, nets.g2(b)).detach().cpu()
                snapshot = {"step": self.step, "losses": {}, "theta": theta, "a": a.detach().cpu(), "b": b.detach().cpu()}
                raise NumericalAbort(f"non-finite theta at step {self.step}", snapshot) from exc

            # Discriminators: D1 on the thermal domain, D2 on the visible one.
            _, d1_loss = relativistic_adv_losses(nets.d1(b), nets.d1(flows.b_hat.detach()))
            real_a = nets.d2(a)
            _, d2_loss1 = relativistic_adv_losses(real_a, nets.d2(flows.a_hat1.detach()))
            _, d2_loss2 = relativistic_adv_losses(real_a, nets.d2(flows.a_hat2.detach()))
            adv_d = 0.5 * (d1_loss + 0.5 * (d2_loss1 + d2_loss2))
        self.opt_d.zero_grad(set_to_none=True)
        adv_d.backward()
        self.opt_d.step()

        with self._autocast():
            g1_adv, _ = relativistic_adv_losses(nets.d1(b).detach(), nets.d1(flows.b_hat))
            real_a = nets.d2(a).detach()
            g2_adv1, _ = relativistic_adv_losses(real_a, nets.d2(flows.a_hat1))
            g2_adv2, _ = relativistic_adv_losses(real_a, nets.d2(flows.a_hat2))
            adv_g = 0.5 * (g1_adv + 0.5 * (g2_adv1 + g2_adv2))
            perc = perceptual_loss(flows.b_hat, b, a, flows.a_hat2, self.feat)
            recon = recon_loss(a, flows.a_hat2)
            morph = morph_triplet_loss(flows.b_r, a, b)
            four = fourier_loss(a, flows.a_hat1) if cfg.train.fourier else torch.zeros(())
            total = total_generator_loss(adv_g, perc, recon, morph, four, w)

        parts = {"perc": perc, "recon": recon, "morph": morph, "fourier": four,
                 "adv_g": adv_g, "adv_d": adv_d, "total_g": total}
        self._guard(parts, a, b, flows.theta)
        self.opt_g.zero_grad(set_to_none=True)
        self.opt_stn.zero_grad(set_to_none=True)
        total.backward()
        self.opt_g.step()
        self.opt_stn.step()
        self.step += 1
        return LossBundle(**{k: float(v.detach()) for k, v in parts.items()}, weights=w)

    def fit(self, fixed: torch.Tensor, moving: torch.Tensor, run_dir=None, steps: int | None = None,
            callback=None) -> list[LossBundle]:
        """Train on in-memory (N, C, H, W) tensors.

        Stops after ``steps`` updates (default ``train.max_steps``) or
        ``train.epochs`` epochs, whichever comes first. With ``run_dir``,
        writes the config snapshot, a JSONL step log and per-epoch
        checkpoints.
        """
        tc = self.cfg.train
        steps = steps if steps is not None else tc.max_steps
        n = fixed.shape[0]
        history: list[LossBundle] = []
        log_fh = None
        if run_dir is not None:
            run_dir = Path(run_dir)
            run_dir.mkdir(parents=True, exist_ok=True)
            self.cfg.dump(run_dir / "config.snapshot")
            log_fh = open(run_dir / "log.jsonl", "a")
        try:
            while self.epoch < tc.epochs and (steps is None or len(history) < steps):
                for idx in batch_order(n, tc.batch_size, tc.seed, self.epoch):
                    if steps is not None and len(history) >= steps:
                        break
                    idx_t = torch.as_tensor(idx)
                    bundle = self.train_step(fixed[idx_t], moving[idx_t])
                    history.append(bundle)
                    if log_fh is not None:
                        log_fh.write(json.dumps({"step": self.step, "epoch": self.epoch, **bundle.to_dict()}) + "\n")
                    if callback is not None:
                        callback(self, bundle)
                self.epoch += 1
                if run_dir is not None and tc.checkpoint_every and self.epoch % tc.checkpoint_every == 0:
                    self.save_checkpoint(run_dir / "checkpoints" / f"epoch_{self.epoch:03d}")
        finally:
            if log_fh is not None:
                log_fh.close()
        if run_dir is not None:
            self.save_checkpoint(run_dir / "checkpoints" / "final")
        return history

    @torch.no_grad()
    def predict(self, fixed: torch.Tensor, moving: torch.Tensor, batch_size: int = 32):
        """(theta, registered) for (N, C, H, W) pairs."""
        return predict(self.nets, fixed, moving, batch_size)

    def save_checkpoint(self, path) -> Path:
        return save_checkpoint(self.nets, self.cfg, path, step=self.step, epoch=self.epoch)


@torch.no_grad()
def predict(nets: Nets, fixed: torch.Tensor, moving: torch.Tensor, batch_size: int = 32):
    nets.eval()
    thetas, regs = [], []
    for i in range(0, fixed.shape[0], batch_size):
        a, b = fixed[i : i + batch_size], moving[i : i + batch_size]
        theta = nets.stn(a, nets.g2(b))
        thetas.append(theta)
        regs.append(warp(b, theta_to_grid(theta, b.shape[-2], b.shape[-1])))
    return torch.cat(thetas), torch.cat(regs)


def save_checkpoint(nets: Nets, cfg: Config, path, step: int = 0, epoch: int = 0) -> Path:
    """Write ``state.pt`` (parameters keyed by module path) and ``config.yaml``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "step": step,
        "epoch": epoch,
        "state": {k: v.detach().cpu() for k, v in nets.state_dict().items()},
    }
    torch.save(payload, path / "state.pt")
    cfg.dump(path / "config.yaml")
    return path


def load_checkpoint(path) -> tuple[Nets, Config]:
    """Load a checkpoint directory, or the latest one under a run directory."""
    from .config import load_config

    path = Path(path)
    if (path / "checkpoints").is_dir():
        path = latest_checkpoint(path / "checkpoints")
    try:
        payload = torch.load(path / "state.pt", map_location="cpu", weights_only=True)
    except (OSError, RuntimeError) as exc:
        raise DataError(f"cannot load checkpoint {path}: {exc}") from exc
    if payload.get("format") != CHECKPOINT_FORMAT or payload.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"{path} is not a version-{CHECKPOINT_VERSION} checkpoint")
    cfg = load_config(path / "config.yaml")
    nets = Nets(cfg)
    nets.load_state_dict(payload["state"])
    nets.eval()
    return nets, cfg


def latest_checkpoint(ckpt_dir: Path) -> Path:
    ckpt_dir = Path(ckpt_dir)
    if (ckpt_dir / "final" / "state.pt").is_file():
        return ckpt_dir / "final"
    epochs = sorted(p for p in ckpt_dir.glob("epoch_*") if (p / "state.pt").is_file())
    if not epochs:
        raise DataError(f"no checkpoints under {ckpt_dir}")
    return epochs[-1]


def register_dataset(manifest: PairManifest, checkpoint, out_dir, direction: str | None = None):
    """Warp every pair's moving image into its fixed frame.

    Writes ``registered/<pair_id>.png``, ``theta_sidecar.csv`` and
    ``registered_manifest.csv`` under ``out_dir``. Unreadable pairs are
    skipped and logged. Returns (registered manifest, skipped pair ids).
    """
    nets, cfg = load_checkpoint(checkpoint) if not isinstance(checkpoint, tuple) else checkpoint
    direction = direction or cfg.train.direction
    out_dir = Path(out_dir)
    (out_dir / "registered").mkdir(parents=True, exist_ok=True)
    size = cfg.train.image_size
    ids, thetas, skipped = [], [], []
    out = PairManifest(root=out_dir)
    for rec in manifest:
        try:
            visible, thermal = load_pair(rec, manifest, size)
        except DataError as exc:
            log.warning("skipping %s: %s", rec.pair_id, exc)
            skipped.append(rec.pair_id)
            continue
        a, b = orient(visible, thermal, direction)
        theta, reg = predict(nets, a[None], b[None])
        reg_path = write_image(reg[0], out_dir / "registered" / f"{rec.pair_id}.png")
        fixed_path = manifest.resolve(rec.visible_path if direction == "t2v" else rec.thermal_path).resolve()
        vis_path, th_path = (fixed_path, reg_path) if direction == "t2v" else (reg_path, fixed_path)
        out.records.append(PairRecord(rec.pair_id, str(Path(vis_path).resolve()), str(Path(th_path).resolve()),
                                      rec.subject_id, rec.lighting, rec.split))
        ids.append(rec.pair_id)
        thetas.append(theta[0])
    if thetas:
        write_theta_table(out_dir / "theta_sidecar.csv", ids, torch.stack(thetas))
    else:
        write_theta_table(out_dir / "theta_sidecar.csv", [], torch.zeros(0, 6))
    write_manifest(out, out_dir / "registered_manifest.csv")
    return out, skipped
