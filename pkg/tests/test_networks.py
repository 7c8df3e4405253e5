import pytest
import torch
import torch.nn as nn

from segcn.errors import ConfigError
from segcn.guidance import extract_multiscale_features
from segcn.networks import (ConvBlock, Discriminator, DiscriminatorSpec, Generator, GeneratorSpec,
                            count_parameters, norm_groups)
from segcn.pac import PacConv2d

SMALL = dict(widths=(4, 8, 8, 8), semantic_channels=(2, 4, 4, 4), guidance_channels=4)


@pytest.mark.parametrize("conv_mode,guidance_mode", [
    ("pixel_adaptive", "multiscale"),
    ("standard", "multiscale"),
    ("pixel_adaptive", "final_map_only"),
    ("standard", "none"),
    ("pixel_adaptive", "none"),
])
def test_generator_shapes_and_range(conv_mode, guidance_mode, tiny_seg):
    sem = (1, 1, 1, 1) if guidance_mode == "final_map_only" else SMALL["semantic_channels"]
    spec = GeneratorSpec(**{**SMALL, "semantic_channels": sem}, conv_mode=conv_mode,
                         guidance_mode=guidance_mode)
    gen = Generator(spec)
    x = torch.rand(2, 3, 32, 32) * 2 - 1
    stack = None
    if guidance_mode == "multiscale":
        stack = extract_multiscale_features((x + 1) / 2, tiny_seg)
    elif guidance_mode == "final_map_only":
        stack = [torch.rand(2, 1, 32 >> s, 32 >> s) for s in range(4)]
    y = gen(x, stack)
    assert y.shape == x.shape
    assert y.min() >= -1 and y.max() <= 1


def test_generator_stage_mismatch(tiny_seg):
    gen = Generator(GeneratorSpec(**SMALL))
    x = torch.rand(1, 3, 32, 32)
    stack = extract_multiscale_features(x, tiny_seg)
    with pytest.raises(ConfigError):
        gen(x, stack[:3])
    with pytest.raises(ConfigError):
        gen(x, None)
    with pytest.raises(ConfigError):
        gen(x, [stack[0], stack[2], stack[2], stack[3]])


def test_pac_constant_one_equals_standard_generator():
    torch.manual_seed(0)
    std = Generator(GeneratorSpec(**SMALL, conv_mode="standard", guidance_mode="none"))
    pac = Generator(GeneratorSpec(**SMALL, conv_mode="pixel_adaptive", guidance_mode="none",
                                  affinity_mode="constant_one"))
    missing, unexpected = pac.load_state_dict(std.state_dict(), strict=False)
    assert unexpected == []
    assert all(k.endswith("log_sigma") for k in missing)
    x = torch.rand(2, 3, 16, 16) * 2 - 1
    assert (std(x) - pac(x)).abs().max().item() < 1e-5


def test_pac_block_with_constant_one_guidance_matches_standard():
    torch.manual_seed(0)
    a = ConvBlock(3, 8, pixel_adaptive=False).double()
    b = ConvBlock(3, 8, pixel_adaptive=True, affinity_mode="constant_one").double()
    b.load_state_dict(a.state_dict(), strict=False)
    x = torch.rand(1, 3, 8, 8, dtype=torch.float64)
    g = torch.rand(1, 4, 8, 8, dtype=torch.float64)
    assert (a(x) - b(x, g)).abs().max().item() < 1e-10


def test_pac_layers_used_when_requested():
    gen = Generator(GeneratorSpec(**SMALL))
    assert any(isinstance(m, PacConv2d) for m in gen.modules())
    plain = Generator(GeneratorSpec(**SMALL, conv_mode="standard", guidance_mode="none"))
    assert not any(isinstance(m, PacConv2d) for m in plain.modules())
    assert len(plain.adapters) == 0


def test_generator_deterministic_init():
    torch.manual_seed(3)
    a = Generator(GeneratorSpec(**SMALL))
    torch.manual_seed(3)
    b = Generator(GeneratorSpec(**SMALL))
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)


def test_spec_validation():
    with pytest.raises(ConfigError):
        GeneratorSpec(conv_mode="dilated")
    with pytest.raises(ConfigError):
        GeneratorSpec(guidance_mode="half")
    with pytest.raises(ConfigError):
        GeneratorSpec(widths=(8, 16), semantic_channels=(4, 8, 16))
    with pytest.raises(ConfigError):
        norm_groups(12)


def test_discriminator_zero_weights_half():
    d = Discriminator(DiscriminatorSpec(widths=(4, 8, 8, 8)))
    for p in d.parameters():
        nn.init.zeros_(p)
    out = d(torch.rand(2, 3, 32, 32))
    assert out.shape == (2, 1, 2, 2)
    assert torch.all(out == 0.5)


def test_discriminator_range_and_determinism():
    torch.manual_seed(4)
    d1 = Discriminator()
    torch.manual_seed(4)
    d2 = Discriminator()
    x = torch.randn(2, 3, 64, 64) * 5
    o1, o2 = d1(x), d2(x)
    assert torch.equal(o1, o2)
    assert o1.min() > 0 and o1.max() < 1
    assert count_parameters(d1) > 0
