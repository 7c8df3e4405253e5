import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from conftest import brute_pac
from segcn.errors import InvalidInput, InvalidParameter, ShapeMismatch
from segcn.pac import (PACLayerSpec, PacConv2d, gaussian_affinity, guidance_distances,
                       pac_forward)


def two_pixel_guidance(f0, f1):
    g = torch.tensor([f0, f1], dtype=torch.float64).T.reshape(1, len(f0), 1, 2)
    return g


def test_affinity_identical_features_is_one():
    g = two_pixel_guidance([0.3, -1.2], [0.3, -1.2])
    for sigma in (0.1, 1.0, 7.0):
        aff = gaussian_affinity(g, sigma)
        assert aff[0, 0, 1, 2, 0, 0].item() == 1.0


def test_affinity_hand_value_sqrt2():
    g = two_pixel_guidance([0.0], [math.sqrt(2)])
    aff = gaussian_affinity(g, 1.0)
    assert aff[0, 0, 1, 2, 0, 0].item() == pytest.approx(math.exp(-1), abs=1e-12)
    assert aff[0, 0, 1, 2, 0, 0].item() == pytest.approx(0.367879, abs=1e-6)


def test_affinity_hand_value_underflow_nonnegative():
    g = two_pixel_guidance([0.0, 0.0], [3.0, 4.0])
    v = gaussian_affinity(g, 0.5)[0, 0, 1, 2, 0, 0].item()
    assert v == pytest.approx(math.exp(-50), rel=1e-9)
    assert v == pytest.approx(1.9e-22, rel=0.02)
    assert v >= 0
    g32 = two_pixel_guidance([0.0], [40.0]).float()
    assert gaussian_affinity(g32, 0.5).min().item() >= 0


def test_affinity_large_sigma_is_one():
    g = torch.randn(1, 3, 5, 5, dtype=torch.float64)
    aff = gaussian_affinity(g, 1e6)
    assert (aff - 1).abs().max().item() < 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.floats(0.2, 5.0), st.integers(0, 2**31 - 1))
def test_affinity_in_unit_interval(d, sigma, seed):
    g = torch.randn(2, d, 6, 5, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    aff = gaussian_affinity(g, sigma)
    assert aff.max().item() <= 1.0
    assert aff.min().item() > 0.0
    # centre of the window is always exactly 1
    assert torch.all(aff[:, :, 1, 1] == 1.0)


def test_affinity_per_filter_sigma_shape():
    g = torch.randn(2, 3, 4, 4)
    aff = gaussian_affinity(g, torch.tensor([0.5, 1.0, 2.0]), kernel_size=5)
    assert aff.shape == (2, 3, 5, 5, 4, 4)


def test_nonpositive_sigma_rejected():
    g = torch.randn(1, 2, 4, 4)
    for bad in (0.0, -1.0, torch.tensor([1.0, 0.0])):
        with pytest.raises(InvalidParameter):
            gaussian_affinity(g, bad)
        with pytest.raises(InvalidParameter):
            pac_forward(torch.randn(1, 2, 4, 4), g, torch.randn(2, 2, 3, 3), sigma=bad)


def test_nonfinite_guidance_rejected():
    g = torch.randn(1, 2, 4, 4)
    g[0, 1, 2, 2] = float("nan")
    with pytest.raises(InvalidInput):
        gaussian_affinity(g, 1.0)
    g[0, 1, 2, 2] = float("inf")
    with pytest.raises(InvalidInput):
        pac_forward(torch.randn(1, 3, 4, 4), g, torch.randn(2, 3, 3, 3))


def test_spatial_mismatch_rejected():
    with pytest.raises(ShapeMismatch):
        pac_forward(torch.randn(1, 3, 8, 8), torch.randn(1, 2, 8, 7), torch.randn(4, 3, 3, 3))
    with pytest.raises(ShapeMismatch):
        pac_forward(torch.randn(2, 3, 8, 8), torch.randn(1, 2, 8, 8), torch.randn(4, 3, 3, 3))
    with pytest.raises(ShapeMismatch):
        pac_forward(torch.randn(1, 5, 8, 8), torch.randn(1, 2, 8, 8), torch.randn(4, 3, 3, 3))


def test_even_kernel_rejected():
    with pytest.raises(InvalidParameter):
        pac_forward(torch.randn(1, 3, 8, 8), torch.randn(1, 2, 8, 8), torch.randn(4, 3, 2, 2))
    with pytest.raises(InvalidParameter):
        PACLayerSpec(3, 4, kernel_size=4)
    with pytest.raises(InvalidParameter):
        PACLayerSpec(3, 4, sigma_init=0.0)
    with pytest.raises(InvalidParameter):
        PACLayerSpec(3, 4, affinity_mode="cosine")


def test_identity_window_k1():
    v = torch.tensor([[[[2.5]], [[-1.0]]]], dtype=torch.float64)
    w = torch.tensor([[[[0.5]], [[3.0]]]], dtype=torch.float64)
    g = torch.randn(1, 4, 1, 1, dtype=torch.float64)
    out = pac_forward(v, g, w, torch.tensor([0.25], dtype=torch.float64), sigma=0.3)
    assert out.item() == pytest.approx(0.5 * 2.5 + 3.0 * -1.0 + 0.25, abs=1e-12)


def test_all_ones_3x3_hand_values():
    x = torch.ones(1, 1, 3, 3, dtype=torch.float64)
    g = torch.full((1, 2, 3, 3), 0.7, dtype=torch.float64)
    w = torch.ones(1, 1, 3, 3, dtype=torch.float64)
    out = pac_forward(x, g, w, torch.zeros(1, dtype=torch.float64), sigma=1.0)[0, 0]
    expected = torch.tensor([[4.0, 6.0, 4.0], [6.0, 9.0, 6.0], [4.0, 6.0, 4.0]], dtype=torch.float64)
    assert torch.equal(out, expected)


@pytest.mark.parametrize("mode_guidance", ["constant_one", "no_guidance"])
def test_constant_one_matches_conv2d(mode_guidance):
    x = torch.randn(2, 8, 16, 16, dtype=torch.float64)
    w = torch.randn(5, 8, 3, 3, dtype=torch.float64)
    b = torch.randn(5, dtype=torch.float64)
    if mode_guidance == "constant_one":
        g = torch.randn(2, 3, 16, 16, dtype=torch.float64)
        out = pac_forward(x, g, w, b, affinity_mode="constant_one")
    else:
        out = pac_forward(x, None, w, b)
    ref = F.conv2d(x, w, b, padding=1)
    assert (out - ref).abs().max().item() < 1e-6


def test_constant_one_float32_within_rounding():
    x = torch.randn(2, 8, 16, 16)
    w = torch.randn(5, 8, 3, 3)
    out = pac_forward(x, torch.randn(2, 3, 16, 16), w, None, affinity_mode="constant_one")
    ref = F.conv2d(x, w, None, padding=1)
    assert (out - ref).abs().max().item() < 1e-5 * ref.abs().max().item()


def test_gaussian_matches_brute_force():
    gen = torch.Generator().manual_seed(3)
    x = torch.randn(2, 3, 6, 5, generator=gen, dtype=torch.float64)
    g = torch.randn(2, 2, 6, 5, generator=gen, dtype=torch.float64)
    w = torch.randn(4, 3, 3, 3, generator=gen, dtype=torch.float64)
    b = torch.randn(4, generator=gen, dtype=torch.float64)
    sigma = torch.tensor([0.5, 1.0, 1.5, 3.0], dtype=torch.float64)
    out = pac_forward(x, g, w, b, sigma)
    ref = brute_pac(x, g, w, b, sigma)
    assert np.abs(out.numpy() - ref).max() < 1e-12


def test_gaussian_k5_matches_brute_force():
    gen = torch.Generator().manual_seed(4)
    x = torch.randn(1, 2, 7, 6, generator=gen, dtype=torch.float64)
    g = torch.randn(1, 3, 7, 6, generator=gen, dtype=torch.float64)
    w = torch.randn(3, 2, 5, 5, generator=gen, dtype=torch.float64)
    out = pac_forward(x, g, w, None, 0.8)
    assert np.abs(out.numpy() - brute_pac(x, g, w, None, 0.8)).max() < 1e-12


def test_precomputed_distances_give_same_output():
    x = torch.randn(1, 3, 8, 8)
    g = torch.randn(1, 2, 8, 8)
    w = torch.randn(4, 3, 3, 3)
    d = guidance_distances(g, 3)
    assert torch.equal(pac_forward(x, g, w, sigma=0.9), pac_forward(x, g, w, sigma=0.9, distances=d))


def test_gradcheck_all_arguments():
    gen = torch.Generator().manual_seed(5)
    args = [
        torch.randn(1, 2, 5, 4, generator=gen, dtype=torch.float64),
        torch.randn(1, 2, 5, 4, generator=gen, dtype=torch.float64),
        torch.randn(3, 2, 3, 3, generator=gen, dtype=torch.float64),
        torch.randn(3, generator=gen, dtype=torch.float64),
        torch.rand(3, generator=gen, dtype=torch.float64) + 0.5,
    ]
    for a in args:
        a.requires_grad_(True)
    assert torch.autograd.gradcheck(lambda *a: pac_forward(*a), args, eps=1e-6, atol=1e-7)


def test_gradcheck_shared_sigma():
    gen = torch.Generator().manual_seed(6)
    x = torch.randn(2, 2, 4, 4, generator=gen, dtype=torch.float64, requires_grad=True)
    g = torch.randn(2, 1, 4, 4, generator=gen, dtype=torch.float64, requires_grad=True)
    w = torch.randn(2, 2, 3, 3, generator=gen, dtype=torch.float64, requires_grad=True)
    s = torch.tensor(0.8, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda x, g, w, s: pac_forward(x, g, w, None, s), (x, g, w, s))


def test_constant_one_gradients_equal_conv_gradients():
    x = torch.randn(2, 3, 6, 6, requires_grad=True)
    w = torch.randn(4, 3, 3, 3, requires_grad=True)
    b = torch.randn(4, requires_grad=True)
    up = torch.randn(2, 4, 6, 6)
    grads = torch.autograd.grad((pac_forward(x, torch.randn(2, 2, 6, 6), w, b,
                                             affinity_mode="constant_one") * up).sum(), (x, w, b))
    ref = torch.autograd.grad((F.conv2d(x, w, b, padding=1) * up).sum(), (x, w, b))
    for a, r in zip(grads, ref):
        assert (a - r).abs().max().item() < 1e-5


def test_bias_gradient_is_upstream_sum():
    x = torch.full((2, 3, 5, 5), 0.4)
    w = torch.zeros(4, 3, 3, 3)
    b = torch.zeros(4, requires_grad=True)
    up = torch.randn(2, 4, 5, 5)
    (gb,) = torch.autograd.grad((pac_forward(x, torch.randn(2, 2, 5, 5), w, b) * up).sum(), (b,))
    assert torch.allclose(gb, up.sum(dim=(0, 2, 3)), atol=1e-6)


def test_module_parameters_and_sigma():
    layer = PacConv2d(PACLayerSpec(3, 6, sigma_init=2.0))
    assert set(dict(layer.named_parameters())) == {"weight", "bias", "log_sigma"}
    assert torch.allclose(layer.sigma, torch.full((6,), 2.0))
    out = layer(torch.randn(2, 3, 8, 8), torch.randn(2, 4, 8, 8))
    assert out.shape == (2, 6, 8, 8)
    out.sum().backward()
    assert layer.log_sigma.grad is not None and torch.isfinite(layer.log_sigma.grad).all()
