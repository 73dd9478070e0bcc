"""Registration quality metrics and difference-map rendering."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

from .errors import DataError, InvalidArgumentError, UndefinedStatisticError
from .imageops import as_tensor
from .losses import morph_gradient

SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _np(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def _plane(x) -> np.ndarray:
    """Squeeze a single-channel image to (H, W)."""
    arr = _np(x)
    while arr.ndim > 2 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise InvalidArgumentError(f"expected a single-channel image, got shape {arr.shape}")
    return arr


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise InvalidArgumentError(f"shape mismatch: {a.shape} vs {b.shape}")


def _gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(r**2) / (2 * sigma**2))
    return w / w.sum()


def _filter_valid(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    pad = (len(w) - 1) // 2
    out = correlate1d(correlate1d(x, w, axis=0, mode="constant"), w, axis=1, mode="constant")
    return out[pad:-pad, pad:-pad]


def ssim(a, b, data_range: float = 2.0) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03.

    Local statistics use population (biased) moments; border pixels whose
    window would leave the image are excluded from the mean.
    """
    x, y = _plane(a), _plane(b)
    _check_pair(x, y)
    if min(x.shape) < SSIM_WIN:
        raise InvalidArgumentError(f"ssim needs images of at least {SSIM_WIN}px per side")
    w = _gaussian_window()
    mx, my = _filter_valid(x, w), _filter_valid(y, w)
    vx = _filter_valid(x * x, w) - mx * mx
    vy = _filter_valid(y * y, w) - my * my
    cxy = _filter_valid(x * y, w) - mx * my
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    num = (2 * mx * my + c1) * (2 * cxy + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(np.mean(num / den))


def ncc(a, b, eps: float = 1e-12) -> float:
    """Zero-mean normalised cross-correlation (Pearson coefficient)."""
    x, y = _np(a).ravel(), _np(b).ravel()
    _check_pair(x, y)
    x = x - x.mean()
    y = y - y.mean()
    sx, sy = np.sqrt(np.mean(x * x)), np.sqrt(np.mean(y * y))
    if sx < eps or sy < eps:
        raise UndefinedStatisticError("ncc undefined for a zero-variance image")
    return float(np.clip(np.mean(x * y) / (sx * sy), -1.0, 1.0))


def joint_histogram(a, b, bins: int = 32, value_range=(-1.0, 1.0)) -> np.ndarray:
    """Joint probability table over ``bins`` x ``bins`` cells.

    Values are clipped into ``value_range``; ``None`` uses the joint min/max.
    """
    x, y = _np(a).ravel(), _np(b).ravel()
    _check_pair(x, y)
    if value_range is None:
        lo, hi = min(x.min(), y.min()), max(x.max(), y.max())
        if hi <= lo:
            hi = lo + 1.0
    else:
        lo, hi = value_range
    x, y = np.clip(x, lo, hi), np.clip(y, lo, hi)
    counts, _, _ = np.histogram2d(x, y, bins=bins, range=[[lo, hi], [lo, hi]])
    return counts / counts.sum()


def entropy(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))


def mutual_information(a, b, bins: int = 32, value_range=(-1.0, 1.0)) -> float:
    """Plug-in mutual information of the joint histogram, in nats."""
    pxy = joint_histogram(a, b, bins, value_range)
    mi = entropy(pxy.sum(axis=1)) + entropy(pxy.sum(axis=0)) - entropy(pxy)
    return max(mi, 0.0)


def edge_metrics(visible, thermal) -> tuple[float, float]:
    """(SSIM, NCC) of the morphological-gradient edge maps."""
    ev = morph_gradient(as_tensor(visible))
    et = morph_gradient(as_tensor(thermal))
    return ssim(ev, et), ncc(ev, et)


def psnr(a, b, data_range: float = 2.0) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` for identical inputs."""
    x, y = _np(a), _np(b)
    _check_pair(x, y)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


def difference_map(visible, thermal, out_path=None) -> np.ndarray:
    """Red/blue overlay of a registered pair, as uint8 (H, W, 3).

    Both inputs are [-1, 1] images (luminance is taken for 3 channels).
    Red shows where the visible image is brighter, blue where the thermal is;
    structure the two share cancels to black. A black thermal image
    therefore yields the visible image in pure red.
    """
    from .imageops import to_luminance, to_unit

    v = _plane(to_unit(to_luminance(as_tensor(visible))))
    t = _plane(to_unit(to_luminance(as_tensor(thermal))))
    _check_pair(v, t)
    d = t - v
    rgb = np.zeros(v.shape + (3,), dtype=np.float64)
    rgb[..., 0] = np.clip(-d, 0.0, 1.0)
    rgb[..., 2] = np.clip(d, 0.0, 1.0)
    out = np.round(rgb * 255.0).astype(np.uint8)
    if out_path is not None:
        from PIL import Image

        try:
            Path(out_path).parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray(out, mode="RGB").save(out_path)
        except OSError as exc:
            raise DataError(f"cannot write difference map to {out_path}: {exc}") from exc
    return out


# --------------------------------------------------------------------------
# Reports

REPORT_FIELDS = ("ssim_edges", "ncc_edges", "mutual_info", "lpips", "psnr")


@dataclass
class PairScores:
    pair_id: str
    ssim_edges: float
    ncc_edges: float
    mutual_info: float
    lpips: float | None = None
    psnr: float | None = None


@dataclass
class EvalReport:
    rows: list[PairScores] = field(default_factory=list)

    def means(self) -> dict[str, float | None]:
        out: dict[str, float | None] = {}
        for name in REPORT_FIELDS:
            vals = [getattr(r, name) for r in self.rows if getattr(r, name) is not None]
            out[name] = float(np.mean(vals)) if vals else None
        return out

    def write(self, out_dir) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out_dir / "eval_pairs.csv", out_dir / "eval_summary.json"
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("pair_id",) + REPORT_FIELDS)
            for r in self.rows:
                writer.writerow([r.pair_id] + [_fmt(getattr(r, k)) for k in REPORT_FIELDS])
        summary = {"n_pairs": len(self.rows), "means": {k: _fmt(v) for k, v in self.means().items()}}
        json_path.write_text(json.dumps(summary, indent=2))
        return csv_path, json_path


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    return v


def evaluate_pair(pair_id: str, visible, thermal, mi_bins: int = 32, feat=None) -> PairScores:
    """Edge SSIM/NCC and MI for one pair; ``feat`` adds the perceptual distance.

    Zero-variance edge maps make NCC undefined; such rows record NaN.
    """
    from .imageops import to_luminance

    v, t = as_tensor(visible), as_tensor(thermal)
    try:
        s, c = edge_metrics(v, t)
    except UndefinedStatisticError:
        s, c = ssim(morph_gradient(v), morph_gradient(t)), float("nan")
    mi = mutual_information(to_luminance(v), to_luminance(t), bins=mi_bins)
    lp = None
    if feat is not None:
        import torch

        with torch.no_grad():
            lp = float(feat.distance(_rgb(v), _rgb(t)).mean())
    return PairScores(pair_id, s, c, mi, lp, psnr(v, t))


def _rgb(x):
    if x.ndim == 3:
        x = x.unsqueeze(0)
    return x.expand(-1, 3, -1, -1) if x.shape[1] == 1 else x
