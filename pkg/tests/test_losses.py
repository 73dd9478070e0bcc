import math

import numpy as np
import pytest
import torch

from vtreg.errors import ConfigError, InvalidArgumentError
from vtreg.losses import (
    FeatureExtractor,
    LossBundle,
    LossWeights,
    fourier_loss,
    fourier_spectra,
    fourier_terms,
    morph_gradient,
    morph_triplet_loss,
    perceptual_loss,
    recon_loss,
    relativistic_adv_losses,
    total_generator_loss,
    triplet_hinge,
)

from conftest import smooth_image


@pytest.fixture(scope="module")
def feat():
    return FeatureExtractor("light", seed=0)


def img(seed=0, size=32):
    return smooth_image(size, 3, seed=seed, sigma=2.0)


def luminance_np(x):
    x = x.numpy()
    return 0.299 * x[0] + 0.587 * x[1] + 0.114 * x[2]


# -- perceptual -------------------------------------------------------------


def test_perceptual_zero_and_positive(feat):
    x, y = img(0), img(1)
    assert float(perceptual_loss(x, x, y, y, feat)) < 1e-6
    noisy = x + 0.1 * torch.randn_like(x)
    assert float(perceptual_loss(x, noisy, y, y, feat)) > 0


def test_perceptual_monotone_in_noise(feat):
    x = img(2)
    noise = torch.randn_like(x)
    vals = [float(perceptual_loss(x, x + s * noise, x, x, feat)) for s in (0.05, 0.1, 0.2)]
    assert vals[0] <= vals[1] <= vals[2]


def test_perceptual_matches_manual_reduction(feat):
    x, y = img(3), img(4)
    fx, fy = feat.features(x), feat.features(y)
    expected = 0.0
    for a, b in zip(fx, fy):
        a = a.numpy()[0]
        b = b.numpy()[0]
        a = a / np.sqrt((a**2).sum(0, keepdims=True) + 1e-20)
        b = b / np.sqrt((b**2).sum(0, keepdims=True) + 1e-20)
        expected += ((a - b) ** 2).mean(0).mean()
    got = float(perceptual_loss(x, y, x, x, feat))
    assert abs(got - expected) < 1e-5


def test_perceptual_sums_both_pairs(feat):
    x, y, z = img(5), img(6), img(7)
    both = perceptual_loss(x, y, x, z, feat)
    parts = perceptual_loss(x, y, x, x, feat) + perceptual_loss(x, x, x, z, feat)
    assert torch.allclose(both, parts, atol=1e-6)


def test_feature_extractor_frozen_and_hermetic():
    f1, f2 = FeatureExtractor("light", seed=3), FeatureExtractor("light", seed=3)
    assert all(not p.requires_grad for p in f1.parameters())
    x = img(8)
    assert all(torch.equal(a, b) for a, b in zip(f1.features(x), f2.features(x)))
    f1.train()
    assert not f1.training
    with pytest.raises(ConfigError):
        FeatureExtractor("resnet")
    with pytest.raises(ConfigError):
        FeatureExtractor("light", pretrained=True)


def test_vgg16_layout_shapes():
    f = FeatureExtractor("vgg16", seed=0)
    taps = f.features(torch.zeros(1, 3, 32, 32))
    assert [t.shape[1] for t in taps] == [64, 128, 256, 512, 512]
    assert [t.shape[-1] for t in taps] == [32, 16, 8, 4, 2]


def test_perceptual_shape_mismatch(feat):
    with pytest.raises(InvalidArgumentError):
        perceptual_loss(img(0, 32), img(0, 16), img(0, 32), img(0, 32), feat)


# -- reconstruction / morphology --------------------------------------------


def test_recon_examples():
    x = img(0)
    assert float(recon_loss(x, x)) == 0.0
    assert float(recon_loss(torch.zeros(3, 8, 8), torch.ones(3, 8, 8))) == 1.0
    assert abs(float(recon_loss(x, x + 0.5)) - 0.5) < 1e-6
    with pytest.raises(InvalidArgumentError):
        recon_loss(torch.zeros(3, 8, 8), torch.zeros(3, 4, 4))


def test_morph_gradient_constant_and_step():
    assert morph_gradient(torch.full((3, 8, 8), 0.3)).abs().max() < 1e-6
    step = torch.zeros(1, 6, 6)
    step[..., 3:] = 1.0
    g = morph_gradient(step)[0]
    expected = torch.zeros(6, 6)
    expected[:, 2:4] = 1.0  # the two columns straddling the edge
    assert torch.equal(g, expected)
    assert torch.equal(morph_gradient(-step)[0], g)


def test_morph_gradient_nonnegative():
    g = morph_gradient(torch.randn(2, 3, 16, 16))
    assert g.shape == (2, 1, 16, 16)
    assert g.min() >= 0


def test_morph_gradient_matches_scipy():
    from scipy.ndimage import grey_dilation, grey_erosion

    x = torch.randn(1, 12, 12)
    ref = grey_dilation(x[0].numpy(), size=3, mode="nearest") - grey_erosion(x[0].numpy(), size=3, mode="nearest")
    assert np.allclose(morph_gradient(x)[0].numpy(), ref, atol=1e-6)


def test_triplet_examples():
    x = img(0)
    assert float(morph_triplet_loss(x, x, x)) == 1.0
    assert float(triplet_hinge(torch.tensor([0.0]), torch.tensor([2.0]))) == 0.0
    assert abs(float(triplet_hinge(torch.tensor([0.5]), torch.tensor([0.2]))) - 1.3) < 1e-6
    with pytest.raises(InvalidArgumentError):
        morph_triplet_loss(x, x, img(0, 16))


def test_triplet_batch_mean():
    a = torch.zeros(2, 1, 4, 4)
    b = torch.zeros(2, 1, 4, 4)
    b_r = torch.zeros(2, 1, 4, 4)
    b[1, :, :, 2:] = 4.0  # edges only in sample 1's b
    g = morph_gradient(b[1])
    d_neg = float((g**2).mean())
    expected = 0.5 * (1.0 + max(1.0 - d_neg, 0.0))
    assert abs(float(morph_triplet_loss(b_r, a, b)) - expected) < 1e-6


# -- Fourier -------------------------------------------------------------------


def test_fourier_matches_numpy():
    x, y = img(0), img(1)
    fx = np.fft.fft2(luminance_np(x), norm="ortho")
    fy = np.fft.fft2(luminance_np(y), norm="ortho")
    amp_ref = np.abs(np.abs(fx) - np.abs(fy)).mean()
    pha_ref = np.abs(np.angle(fx) - np.angle(fy)).mean()
    amp, pha = fourier_terms(x, y)
    assert abs(float(amp) - amp_ref) < 1e-5
    assert abs(float(pha) - pha_ref) < 1e-4
    assert abs(float(fourier_loss(x, y)) - (amp_ref + pha_ref)) < 1e-4


def test_fourier_identity_zero():
    x = img(2)
    assert float(fourier_loss(x, x)) < 1e-6


@pytest.mark.parametrize("shift", [(1, 0), (3, 5), (-7, 2)])
def test_fourier_shift_theorem(shift):
    x = img(3)
    shifted = torch.roll(x, shifts=shift, dims=(-2, -1))
    amp, pha = fourier_terms(x, shifted)
    assert float(amp) < 1e-5
    assert float(pha) > 0


def test_fourier_constants_only_dc():
    amp0, _ = fourier_spectra(torch.zeros(3, 8, 8))
    amp1, _ = fourier_spectra(torch.ones(3, 8, 8))
    diff = (amp1 - amp0).abs()[0, 0]
    assert abs(float(diff[0, 0]) - 8.0) < 1e-5  # sqrt(64) under ortho norm
    diff[0, 0] = 0
    assert diff.max() < 1e-6


# -- adversarial -----------------------------------------------------------------


def bce_np(logit, target):
    p = 1 / (1 + np.exp(-logit))
    return float(np.mean(-(target * np.log(p) + (1 - target) * np.log(1 - p))))


def test_relativistic_equal_logits_log2():
    d = torch.full((2, 16, 16), 0.7)
    adv_g, adv_d = relativistic_adv_losses(d, d)
    assert abs(float(adv_d) - math.log(2)) < 1e-6
    assert abs(float(adv_g) - math.log(2)) < 1e-6


def test_relativistic_saturation():
    adv_g, adv_d = relativistic_adv_losses(torch.full((16, 16), 10.0), torch.full((16, 16), -10.0))
    assert float(adv_d) < 1e-6
    assert float(adv_g) > 19


def test_relativistic_matches_closed_form():
    rng = np.random.default_rng(0)
    real, fake = rng.normal(size=(2, 4, 4)), rng.normal(size=(2, 4, 4))
    rr, rf = real - fake.mean(), fake - real.mean()
    adv_d_ref = 0.5 * (bce_np(rr, 1) + bce_np(rf, 0))
    adv_g_ref = 0.5 * (bce_np(rr, 0) + bce_np(rf, 1))
    adv_g, adv_d = relativistic_adv_losses(torch.tensor(real), torch.tensor(fake))
    assert abs(float(adv_d) - adv_d_ref) < 1e-9
    assert abs(float(adv_g) - adv_g_ref) < 1e-9


def test_relativistic_swap_symmetry():
    real, fake = torch.randn(8, 8), torch.randn(8, 8)
    g1, d1 = relativistic_adv_losses(real, fake)
    g2, d2 = relativistic_adv_losses(fake, real)
    assert torch.allclose(g1, d2) and torch.allclose(d1, g2)
    with pytest.raises(InvalidArgumentError):
        relativistic_adv_losses(torch.zeros(4, 4), torch.zeros(2, 2))


# -- aggregation --------------------------------------------------------------------


def test_total_generator_loss_examples():
    assert total_generator_loss(0, 0, 0, 0, 0, LossWeights(2, 3, 4, 5, 6)) == 0
    assert total_generator_loss(1, 1, 1, 1, 0) == 4
    base = total_generator_loss(0.3, 0.2, 0.5, 1.0, 0.0)
    doubled = total_generator_loss(0.3, 0.2, 0.5, 1.0, 0.0, LossWeights(recon=2.0))
    assert abs((doubled - base) - 0.5) < 1e-12


def test_bundle_invariant_and_serialisation():
    w = LossWeights(perc=2.0)
    b = LossBundle(perc=0.1, recon=0.2, morph=1.0, adv_g=0.7, adv_d=0.6, weights=w)
    b.total_g = total_generator_loss(b.adv_g, b.perc, b.recon, b.morph, b.fourier, w)
    assert abs(b.total_g - (0.7 + 0.2 + 0.2 + 1.0)) < 1e-12
    assert b.is_finite()
    d = b.to_dict()
    assert d["weights"]["perc"] == 2.0 and set(d) >= {"perc", "recon", "morph", "fourier", "adv_g", "adv_d", "total_g"}
    assert not LossBundle(perc=float("nan")).is_finite()


def test_total_has_gradient_wrt_theta_through_warp(feat):
    from vtreg.geometry import theta_to_grid, warp, identity_theta
    from vtreg.transnets import GeneratorConfig, UNetGenerator

    g2 = UNetGenerator(GeneratorConfig(base_channels=4, max_channels=8))
    a, b = torch.randn(2, 3, 32, 32), torch.randn(2, 3, 32, 32)
    theta = (identity_theta(2) + 0.01 * torch.randn(2, 6)).requires_grad_(True)
    b_r = warp(b, theta_to_grid(theta, 32, 32))
    a_hat2 = g2(b_r)
    total = total_generator_loss(
        torch.zeros(()), perceptual_loss(a, a, a, a_hat2, feat), recon_loss(a, a_hat2), morph_triplet_loss(b_r, a, b)
    )
    total.backward()
    assert theta.grad.abs().sum() > 0
