import pytest
import torch

from vtreg.errors import ConfigError, InvalidArgumentError
from vtreg.transnets import (
    BlurPool,
    DiscriminatorConfig,
    GeneratorConfig,
    PatchDiscriminator,
    UNetGenerator,
    discriminate,
    down_block,
    generate,
)


def small_gen(**kw):
    return UNetGenerator(GeneratorConfig(base_channels=4, max_channels=16, **kw))


def test_generator_shape_range_and_structure():
    g = small_gen()
    assert len(g.encoders) + 1 == 5 and len(g.decoders) == 4
    out = generate(g, torch.randn(2, 3, 64, 64))
    assert out.shape == (2, 3, 64, 64)
    assert out.min() >= -1 and out.max() <= 1


def test_generator_256():
    g = small_gen().eval()
    with torch.no_grad():
        out = g(torch.randn(1, 3, 256, 256))
    assert out.shape == (1, 3, 256, 256)


def test_generator_deterministic_in_eval():
    g = small_gen().eval()
    x = torch.randn(3, 32, 32)
    assert torch.equal(g(x), g(x))


def test_generator_gradient_wrt_input():
    g = small_gen()
    x = torch.randn(1, 3, 32, 32, requires_grad=True)
    g(x).mean().backward()
    assert x.grad.abs().sum() > 0


def test_generator_rejects_bad_input():
    g = small_gen()
    with pytest.raises(ConfigError):
        g(torch.randn(1, 3, 40, 40))
    with pytest.raises(InvalidArgumentError):
        g(torch.randn(1, 1, 32, 32))
    with pytest.raises(ConfigError):
        GeneratorConfig(encoder_blocks=5, decoder_blocks=3).validate()


def test_blurpool_binomial_kernel():
    bp = BlurPool(1)
    x = torch.zeros(1, 1, 6, 6)
    x[0, 0, 2, 2] = 16.0
    y = bp(x)
    assert y.shape == (1, 1, 3, 3)
    # Output (1, 1) samples the padded input centred on (2, 2).
    assert torch.allclose(y[0, 0, 1, 1], torch.tensor(4.0))
    assert torch.allclose(y[0, 0, 1, 0], torch.tensor(0.0))
    assert torch.allclose(bp(torch.ones(1, 1, 8, 8)), torch.ones(1, 1, 4, 4))


def test_blurpool_toggle_keeps_weight_shapes():
    with_bp = down_block(8, 16, blurpool=True)
    without = down_block(8, 16, blurpool=False)
    assert with_bp[0].weight.shape == without[0].weight.shape
    assert with_bp[0].stride == (1, 1) and without[0].stride == (2, 2)
    x = torch.randn(1, 8, 16, 16)
    assert with_bp(x).shape == without(x).shape == (1, 16, 8, 8)
    g1, g2 = small_gen(use_blurpool=True), small_gen(use_blurpool=False)
    assert [p.shape for p in g1.parameters()] == [p.shape for p in g2.parameters()]


def test_discriminator_patch_map():
    d = PatchDiscriminator(DiscriminatorConfig(base_channels=4, max_channels=16)).eval()
    with torch.no_grad():
        out = discriminate(d, torch.randn(2, 3, 256, 256))
    assert out.shape == (2, 16, 16)
    d64 = PatchDiscriminator(DiscriminatorConfig(image_size=64, base_channels=4, max_channels=16))
    assert d64(torch.randn(3, 64, 64)).shape == (16, 16)


def test_discriminator_logits_unbounded_and_errors():
    d = PatchDiscriminator(DiscriminatorConfig(image_size=64, base_channels=4, max_channels=16))
    with torch.no_grad():
        d.net[-1].bias.fill_(5.0)
    assert d(torch.randn(1, 3, 64, 64)).min() > 1.0  # no squashing
    with pytest.raises(InvalidArgumentError):
        d(torch.randn(1, 3, 32, 32))
    with pytest.raises(ConfigError):
        DiscriminatorConfig(image_size=96, patch_out=16).validate()
