import math

import cv2
import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from phantoms import vessel_phantom
from vtreg.errors import ConfigError
from vtreg.vessels import (
    VesselConfig,
    anisotropic_diffusion,
    clahe,
    identity_similarity,
    opening,
    thermal_to_unit,
    top_hat,
    vessel_map,
)


# -- diffusion ------------------------------------------------------------------


def test_diffusion_constant_and_zero_iters():
    c = np.full((16, 16), 0.4)
    assert np.array_equal(anisotropic_diffusion(c), c)
    x = np.random.default_rng(0).random((16, 16))
    assert np.array_equal(anisotropic_diffusion(x, VesselConfig(diffusion_iters=0)), x)


@pytest.mark.parametrize("conductance", ["exp", "rational"])
def test_diffusion_conservation_and_maximum_principle(conductance):
    x = np.random.default_rng(1).random((64, 64))
    out = anisotropic_diffusion(x, VesselConfig(conductance=conductance, kappa=60))
    assert abs(out.mean() - x.mean()) < 1e-3
    assert out.min() >= x.min() - 1e-6 and out.max() <= x.max() + 1e-6
    assert out.var() < x.var()


def test_diffusion_noise_variance_drops_after_10():
    x = np.random.default_rng(2).random((32, 32))
    assert anisotropic_diffusion(x, VesselConfig(diffusion_iters=10)).var() < x.var()


def test_diffusion_single_step_matches_stencil():
    x = np.random.default_rng(3).random((6, 7))
    cfg = VesselConfig(diffusion_iters=1, kappa=40, lam=0.25)
    k = 40 / 255
    g = lambda d: np.exp(-((d / k) ** 2)) * d  # noqa: E731
    expected = x.copy()
    for i in range(6):
        for j in range(7):
            s = 0.0
            for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                ii, jj = i + di, j + dj
                if 0 <= ii < 6 and 0 <= jj < 7:
                    s += g(x[ii, jj] - x[i, j])
            expected[i, j] += 0.25 * s
    assert np.allclose(anisotropic_diffusion(x, cfg), expected, atol=1e-12)


def test_diffusion_preserves_strong_edge():
    step = np.zeros((16, 16))
    step[:, 8:] = 1.0
    out = anisotropic_diffusion(step, VesselConfig(kappa=30))
    assert out[:, 8].min() - out[:, 7].max() > 0.9


def test_config_validation():
    with pytest.raises(ConfigError):
        VesselConfig(lam=0.3).validate()
    with pytest.raises(ConfigError):
        VesselConfig(tophat_kernel=10).validate()
    with pytest.raises(ConfigError):
        VesselConfig(conductance="linear").validate()
    with pytest.raises(ConfigError):
        anisotropic_diffusion(np.zeros((8, 8)), VesselConfig(lam=0.0))


# -- CLAHE ------------------------------------------------------------------------


def test_clahe_constant_unchanged():
    c = np.full((32, 32), 0.3)
    assert np.array_equal(clahe(c), c)


def test_clahe_matches_opencv():
    rng = np.random.default_rng(0)
    img = gaussian_filter(rng.random((256, 256)), 4)
    img = (img - img.min()) / (img.max() - img.min())
    u8 = np.rint(img * 255).astype(np.uint8)
    ref = cv2.createCLAHE(clipLimit=2.0, tileGridSize=(8, 8)).apply(u8) / 255.0
    ours = clahe(u8 / 255.0, clip=2.0, tiles=8)
    assert np.abs(ours - ref).mean() < 0.02


def test_clahe_range_and_entropy_gain():
    yy, xx = np.mgrid[0:64, 0:64]
    ramp = 0.45 + 0.1 * xx / 63.0
    out = clahe(ramp)
    assert out.min() >= 0 and out.max() <= 1

    def ent(x):
        p, _ = np.histogram(x, bins=256, range=(0, 1))
        p = p[p > 0] / p.sum()
        return -(p * np.log(p)).sum()

    assert ent(out) >= ent(ramp)


def test_clahe_errors():
    with pytest.raises(ConfigError):
        clahe(np.random.random((4, 4)), tiles=8)
    with pytest.raises(ConfigError):
        clahe(np.random.random((16, 16)), clip=0)


# -- top-hat ------------------------------------------------------------------------


def test_top_hat_examples():
    assert np.array_equal(top_hat(np.full((20, 20), 0.7)), np.zeros((20, 20)))
    line = np.zeros((32, 32))
    line[:, 15] = 0.8
    out = top_hat(line, 11)
    assert np.allclose(out[:, 15], 0.8) and np.abs(np.delete(out, 15, axis=1)).max() == 0
    dark = 1.0 - line
    assert np.abs(top_hat(dark, 11)).max() < 1e-12
    with pytest.raises(ConfigError):
        top_hat(line, 10)


def test_opening_anti_extensive_and_top_hat_nonneg():
    x = np.random.default_rng(4).random((40, 40))
    assert (opening(x, 5) <= x + 1e-12).all()
    assert (top_hat(x, 5) >= 0).all()


# -- pipeline -------------------------------------------------------------------------


def test_vessel_map_zero_and_deterministic():
    assert np.array_equal(vessel_map(-np.ones((64, 64))), np.zeros((64, 64)))
    img, _ = vessel_phantom(64)
    a, b = vessel_map(img), vessel_map(img)
    assert np.array_equal(a, b)
    assert a.min() >= 0 and a.max() == pytest.approx(1.0)


def test_vessel_response_ratio():
    img, mask = vessel_phantom(128)
    vm = vessel_map(img)
    assert vm[mask].mean() >= 5 * vm[~mask].mean()


def test_identity_similarity_monotone():
    img, _ = vessel_phantom(128)
    rng = np.random.default_rng(5)
    assert identity_similarity(img, img) == math.inf
    noise = rng.standard_normal(img.shape)
    low = identity_similarity(img, np.clip(img + 0.05 * noise, -1, 1))
    high = identity_similarity(img, np.clip(img + 0.2 * noise, -1, 1))
    assert math.isfinite(low) and low > high


def test_thermal_to_unit_luminance():
    rgb = np.stack([np.full((4, 4), -1.0), np.zeros((4, 4)), np.ones((4, 4))])
    expected = (0.299 * -1 + 0.114 * 1 + 1) / 2
    assert np.allclose(thermal_to_unit(rgb), expected)
