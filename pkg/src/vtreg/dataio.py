"""Pair manifests, image loading, synthetic misalignment benchmarks and the
robustness perturbations."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, DataError, ValidationError
from .geometry import affine_from_params, as_theta, warp_affine

log = logging.getLogger(__name__)

MANIFEST_FIELDS = ("pair_id", "visible_path", "thermal_path", "subject_id", "lighting", "split")
LIGHTING = ("hard", "low", "none")
SPLITS = ("train", "test")


@dataclass
class PairRecord:
    pair_id: str
    visible_path: str
    thermal_path: str
    subject_id: str = ""
    lighting: str = "hard"
    split: str = "train"


@dataclass
class PairManifest:
    records: list[PairRecord] = field(default_factory=list)
    root: Path | None = None

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p


def load_manifest(path, check_files: bool = True) -> PairManifest:
    """Read and validate a manifest CSV (header row, one pair per line).

    Relative image paths resolve against the manifest's directory. Missing
    ``lighting`` defaults to ``hard``; missing ``split`` to ``train``.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    manifest = PairManifest(root=path.parent)
    if not text.strip():
        log.warning("manifest %s is empty", path)
        return manifest
    reader = csv.DictReader(text.splitlines())
    missing_cols = {"pair_id", "visible_path", "thermal_path"} - set(reader.fieldnames or ())
    if missing_cols:
        raise ValidationError(f"manifest lacks columns {sorted(missing_cols)}", sorted(missing_cols))

    seen: dict[str, int] = {}
    duplicates, bad_values, missing_files = [], [], []
    for row in reader:
        rec = PairRecord(
            pair_id=(row.get("pair_id") or "").strip(),
            visible_path=(row.get("visible_path") or "").strip(),
            thermal_path=(row.get("thermal_path") or "").strip(),
            subject_id=(row.get("subject_id") or "").strip(),
            lighting=(row.get("lighting") or "").strip().lower() or "hard",
            split=(row.get("split") or "").strip().lower() or "train",
        )
        if rec.pair_id in seen:
            duplicates.append(rec.pair_id)
        seen[rec.pair_id] = 1
        if not rec.pair_id or rec.lighting not in LIGHTING or rec.split not in SPLITS:
            bad_values.append(rec.pair_id or "<blank id>")
        if rec.visible_path == rec.thermal_path:
            bad_values.append(rec.pair_id)
        if check_files:
            for p in (rec.visible_path, rec.thermal_path):
                if not manifest.resolve(p).is_file():
                    missing_files.append(f"{rec.pair_id}:{p}")
        manifest.records.append(rec)
    if duplicates:
        raise ValidationError(f"duplicate pair_id(s): {', '.join(sorted(set(duplicates)))}", duplicates)
    if bad_values:
        raise ValidationError(f"invalid record(s): {', '.join(bad_values)}", bad_values)
    if missing_files:
        raise ValidationError(f"missing image file(s): {', '.join(missing_files)}", missing_files)
    return manifest


def write_manifest(manifest: PairManifest, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS)
        writer.writeheader()
        for rec in manifest.records:
            writer.writerow(asdict(rec))
    return path


# --------------------------------------------------------------------------
# Image I/O


def read_image(path, image_size: int | None = 256, channels: int = 3) -> torch.Tensor:
    """Read a raster into a (channels, S, S) tensor scaled to [-1, 1].

    Single-channel files are replicated when ``channels`` is 3.
    """
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("I;16", "I;16B", "I", "F"):
                arr = np.asarray(im, dtype=np.float64)
                lo, hi = (0.0, 65535.0) if mode.startswith("I;16") else (arr.min(), max(arr.max(), arr.min() + 1))
                arr = (arr - lo) / (hi - lo)
                arr = arr[..., None]
            else:
                im = im.convert("L" if mode in ("L", "LA", "1") else "RGB")
                arr = np.asarray(im, dtype=np.float64) / 255.0
                if arr.ndim == 2:
                    arr = arr[..., None]
    except (OSError, UnidentifiedImageError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    t = torch.from_numpy(arr.transpose(2, 0, 1).copy()).float()
    if t.shape[0] == 3 and channels == 1:
        from .imageops import to_luminance

        t = to_luminance(t)
    elif t.shape[0] == 1 and channels == 3:
        t = t.expand(3, -1, -1).clone()
    if image_size is not None and tuple(t.shape[-2:]) != (image_size, image_size):
        t = F.interpolate(t[None], size=(image_size, image_size), mode="bilinear", antialias=True, align_corners=False)[0]
    return (t.clamp(0.0, 1.0) * 2.0 - 1.0).contiguous()


def write_image(tensor: torch.Tensor, path) -> Path:
    """Write a [-1, 1] (C, H, W) tensor as an 8-bit PNG (grey if channels agree)."""
    from PIL import Image

    arr = ((tensor.detach().cpu().clamp(-1, 1) + 1.0) * 127.5).round().to(torch.uint8).numpy()
    if arr.shape[0] == 3 and (arr[0] == arr[1]).all() and (arr[1] == arr[2]).all():
        arr = arr[:1]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img = Image.fromarray(arr[0]) if arr.shape[0] == 1 else Image.fromarray(arr.transpose(1, 2, 0))
    img.save(path)
    return path


def load_pair(record: PairRecord, manifest: PairManifest | None = None, image_size: int = 256):
    """(visible, thermal) tensors, both (3, S, S) in [-1, 1]."""
    resolve = manifest.resolve if manifest is not None else Path
    visible = read_image(resolve(record.visible_path), image_size, channels=3)
    thermal = read_image(resolve(record.thermal_path), image_size, channels=3)
    return visible, thermal


def orient(visible: torch.Tensor, thermal: torch.Tensor, direction: str):
    """(fixed, moving) for a registration direction.

    ``t2v`` warps the thermal image into the visible frame; ``v2t`` is the
    same computation with the roles swapped.
    """
    if direction == "t2v":
        return visible, thermal
    if direction == "v2t":
        return thermal, visible
    raise ConfigError(f"unknown direction {direction!r}")


# --------------------------------------------------------------------------
# Synthetic benchmark


@dataclass
class ThetaRange:
    """Half-widths of the uniform misalignment distribution.

    ``translation`` bounds tx and ty directly in normalised coordinates
    (the frame spans [-1, 1]); ``scale`` is a relative half-width around 1.
    """

    rotation_deg: float = 10.0
    scale: float = 0.15
    translation: float = 0.2
    shear: float = 0.0

    def validate(self) -> "ThetaRange":
        if self.scale >= 1.0 or self.scale < 0:
            raise ConfigError(f"scale half-width {self.scale} permits degenerate (<= 0) scale")
        if min(self.rotation_deg, self.translation, self.shear) < 0:
            raise ConfigError("range half-widths must be non-negative")
        return self

    def sample(self, rng: np.random.Generator) -> torch.Tensor:
        self.validate()
        rot = rng.uniform(-self.rotation_deg, self.rotation_deg)
        scale = rng.uniform(1.0 - self.scale, 1.0 + self.scale)
        tx, ty = rng.uniform(-self.translation, self.translation, size=2)
        shear = rng.uniform(-self.shear, self.shear)
        return affine_from_params(rot, scale, float(tx), float(ty), shear)


@dataclass
class SyntheticPair:
    fixed: torch.Tensor
    moving: torch.Tensor
    theta_true: torch.Tensor
    seed: int


def make_synthetic(aligned_image: torch.Tensor, theta_range: ThetaRange, seed: int, fixed=None) -> SyntheticPair:
    """Misalign ``aligned_image`` by a random theta drawn from ``theta_range``.

    ``moving = warp(aligned_image, theta_true)``; the registration that
    undoes it is ``invert_affine(theta_true)``. ``fixed`` defaults to the
    aligned image itself (use a different modality rendering for
    cross-spectral pairs).
    """
    theta = theta_range.sample(np.random.default_rng(seed))
    moving = warp_affine(aligned_image, theta)
    return SyntheticPair(
        fixed=aligned_image if fixed is None else fixed, moving=moving, theta_true=theta, seed=seed
    )


def _smooth(x: np.ndarray, sigma: float) -> np.ndarray:
    from scipy.ndimage import gaussian_filter

    return gaussian_filter(x, sigma, mode="nearest") if sigma > 0 else x


def make_phantom(size: int = 64, seed: int = 0, blur: float = 1.5) -> tuple[np.ndarray, np.ndarray]:
    """A face-like scene rendered in two "spectra", both (size, size) in [-1, 1].

    The visible rendering has piecewise-constant regions (head, eyes,
    mouth, random blobs) plus fine texture. The thermal rendering maps
    region intensity through a decreasing nonlinearity, adds a warm face
    gradient and thin bright "vessel" curves. Region boundaries coincide,
    polarity and contrast do not. The border stays at 0 in both so zero
    padding introduces no artificial edge.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    yy = yy / (size - 1) * 2 - 1
    xx = xx / (size - 1) * 2 - 1

    def ellipse(cx, cy, rx, ry, ang):
        c, s = math.cos(ang), math.sin(ang)
        u = (xx - cx) * c + (yy - cy) * s
        v = -(xx - cx) * s + (yy - cy) * c
        return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0

    vis = np.zeros((size, size))
    head_cx, head_cy = rng.uniform(-0.1, 0.1, size=2)
    head = ellipse(head_cx, head_cy, rng.uniform(0.45, 0.6), rng.uniform(0.55, 0.7), rng.uniform(-0.3, 0.3))
    vis[head] = rng.uniform(0.3, 0.7)
    for _ in range(rng.integers(3, 6)):
        cx, cy = head_cx + rng.uniform(-0.4, 0.4), head_cy + rng.uniform(-0.45, 0.45)
        blob = ellipse(cx, cy, rng.uniform(0.06, 0.2), rng.uniform(0.06, 0.2), rng.uniform(0, math.pi)) & head
        vis[blob] = rng.uniform(-0.8, 0.0)
    for _ in range(rng.integers(1, 3)):
        cx, cy = rng.choice([-0.8, 0.8]), rng.uniform(-0.6, 0.6)
        vis[ellipse(cx, cy, 0.12, 0.25, rng.uniform(0, math.pi))] = rng.uniform(-0.7, 0.7)
    texture = _smooth(rng.standard_normal((size, size)), 0.7) * 0.05 * head

    # Thermal: decreasing nonlinear map of visible region intensity.
    th = -np.sin(np.pi * vis / 2.0) * 0.8
    warm = head * (0.25 * np.exp(-((xx - head_cx) ** 2 + (yy - head_cy) ** 2) / 0.3))
    vessels = np.zeros((size, size))
    for _ in range(3):
        t = np.linspace(0, 1, 4 * size)
        x0, y0 = head_cx + rng.uniform(-0.35, 0.35), head_cy + rng.uniform(-0.4, 0.4)
        amp, freq, ang = rng.uniform(0.05, 0.15), rng.uniform(1, 3), rng.uniform(0, math.pi)
        px = x0 + (t - 0.5) * 0.6 * math.cos(ang) - amp * np.sin(2 * np.pi * freq * t) * math.sin(ang)
        py = y0 + (t - 0.5) * 0.6 * math.sin(ang) + amp * np.sin(2 * np.pi * freq * t) * math.cos(ang)
        ci = np.clip(np.rint((py + 1) / 2 * (size - 1)).astype(int), 0, size - 1)
        cj = np.clip(np.rint((px + 1) / 2 * (size - 1)).astype(int), 0, size - 1)
        vessels[ci, cj] = 1.0
    vessels = _smooth(vessels, 0.5) * head
    vessels = 0.3 * vessels / max(vessels.max(), 1e-8)

    frame = _smooth((np.maximum(np.abs(xx), np.abs(yy)) < 0.85).astype(np.float64), size / 64)
    visible = np.clip(_smooth(vis, blur) + texture, -1, 1) * frame
    thermal = np.clip(_smooth(th + warm, blur) + vessels, -1, 1) * frame
    return visible.astype(np.float32), thermal.astype(np.float32)


@dataclass
class SyntheticSet:
    """In-memory cross-spectral benchmark: ``fixed`` (visible) is aligned,
    ``moving`` (thermal) is misaligned by ``theta_true``."""

    fixed: torch.Tensor  # (N, 3, S, S)
    moving: torch.Tensor
    theta_true: torch.Tensor  # (N, 6)
    aligned_moving: torch.Tensor
    seeds: list[int]

    def __len__(self) -> int:
        return self.fixed.shape[0]

    @property
    def pair_ids(self) -> list[str]:
        return [f"pair_{i:04d}" for i in range(len(self))]


def make_synthetic_set(
    n: int,
    size: int = 64,
    seed: int = 0,
    theta_range: ThetaRange | None = None,
    visible_gain: float = 1.0,
) -> SyntheticSet:
    """``n`` phantom pairs with independent misalignments.

    ``visible_gain`` < 1 darkens the visible rendering in intensity space
    (0.1 mimics a no-light capture).
    """
    theta_range = (theta_range or ThetaRange()).validate()
    fixed, moving, thetas, aligned, seeds = [], [], [], [], []
    for i in range(n):
        s = seed * 100_003 + i
        vis, th = make_phantom(size, s)
        vis_t = torch.from_numpy(vis)[None].expand(3, -1, -1)
        if visible_gain != 1.0:
            vis_t = (vis_t + 1.0) * visible_gain - 1.0
        th_t = torch.from_numpy(th)[None].expand(3, -1, -1).contiguous()
        pair = make_synthetic(th_t, theta_range, s, fixed=vis_t.contiguous())
        fixed.append(pair.fixed)
        moving.append(pair.moving)
        thetas.append(pair.theta_true)
        aligned.append(th_t)
        seeds.append(s)
    return SyntheticSet(
        torch.stack(fixed), torch.stack(moving), torch.stack(thetas), torch.stack(aligned), seeds
    )


def batch_order(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Deterministic shuffled mini-batch indices for one epoch."""
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


# --------------------------------------------------------------------------
# Robustness perturbations

PERTURBATIONS = ("erase_visible", "erase_thermal", "vflip")


def erase_box(height: int, width: int, seed: int, area=(0.10, 0.30)) -> tuple[int, int, int, int]:
    """Random rectangle (top, left, h, w) covering ``area`` of the frame."""
    rng = np.random.default_rng(seed)
    total = height * width
    for _ in range(100):
        target = rng.uniform(*area) * total
        aspect = math.exp(rng.uniform(math.log(0.5), math.log(2.0)))
        h = int(round(math.sqrt(target * aspect)))
        w = int(round(math.sqrt(target / aspect)))
        if 0 < h <= height and 0 < w <= width and area[0] <= h * w / total <= area[1]:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return top, left, h, w
    raise ConfigError(f"cannot place an erasure box in a {height}x{width} frame")


def perturb(image: torch.Tensor, kind: str, seed: int = 0) -> torch.Tensor:
    """Erase a random 10-30% rectangle (set to the zero padding value) or
    flip vertically. ``erase_visible``/``erase_thermal`` differ only in which
    image the caller applies them to."""
    if kind == "vflip":
        return torch.flip(image, dims=(-2,))
    if kind in ("erase_visible", "erase_thermal"):
        h, w = image.shape[-2:]
        top, left, bh, bw = erase_box(h, w, seed)
        out = image.clone()
        out[..., top : top + bh, left : left + bw] = 0.0
        return out
    raise ConfigError(f"unknown perturbation {kind!r}; expected one of {PERTURBATIONS}")


def write_theta_table(path, pair_ids, thetas) -> Path:
    """CSV with columns pair_id, a11, a12, tx, a21, a22, ty."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    thetas = as_theta(thetas).detach().cpu().double().numpy().reshape(-1, 6)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("pair_id", "a11", "a12", "tx", "a21", "a22", "ty"))
        for pid, row in zip(pair_ids, thetas):
            writer.writerow([pid] + [repr(float(v)) for v in row])
    return path


def read_theta_table(path) -> dict[str, torch.Tensor]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return {
            row["pair_id"]: torch.tensor([float(row[k]) for k in ("a11", "a12", "tx", "a21", "a22", "ty")])
            for row in reader
        }
