import numpy as np
import pytest
import torch
from scipy.ndimage import gaussian_filter


def smooth_image(size=32, channels=1, seed=0, sigma=3.0):
    """Band-limited random image in [-1, 1], zero outside the central
    region so moderate warps keep all content inside the frame."""
    rng = np.random.default_rng(seed)
    planes = []
    for _ in range(channels):
        x = gaussian_filter(rng.standard_normal((size, size)), sigma)
        x = x / (np.abs(x).max() + 1e-12)
        planes.append(x)
    img = np.stack(planes).astype(np.float32)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1) * 2 - 1
    fade = gaussian_filter((np.maximum(np.abs(xx), np.abs(yy)) < 0.6).astype(float), size / 32)
    return torch.from_numpy(img * fade.astype(np.float32))


@pytest.fixture
def smooth():
    return smooth_image


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)
