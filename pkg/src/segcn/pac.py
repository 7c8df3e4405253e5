"""Pixel-adaptive convolution (PAC) with a Gaussian feature-affinity kernel.

Tensors use the PyTorch layout: images and feature maps are ``(N, C, H, W)``,
convolution weights are ``(C_out, C_in, k, k)``. For every output pixel ``i``
and window offset ``j`` the layer computes

    out_i = sum_j K(f_i, f_j) * W[p_i - p_j] . v_j + b
    K(f_i, f_j) = exp(-||f_i - f_j||^2 / (2 sigma^2))

with one ``sigma`` per output filter. Setting ``K == 1`` (``affinity_mode="constant_one"``
or no guidance at all) reduces the layer to ``F.conv2d`` with zero padding.
"""

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidInput, InvalidParameter, ShapeMismatch

AFFINITY_MODES = ("gaussian", "constant_one")


@dataclass(frozen=True)
class PACLayerSpec:
    in_channels: int
    out_channels: int
    kernel_size: int = 3
    sigma_init: float = 1.0
    affinity_mode: str = "gaussian"

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise InvalidParameter(f"kernel_size must be odd, got {self.kernel_size}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise InvalidParameter("channel counts must be positive")
        if not self.sigma_init > 0:
            raise InvalidParameter(f"sigma_init must be positive, got {self.sigma_init}")
        if self.affinity_mode not in AFFINITY_MODES:
            raise InvalidParameter(f"unknown affinity_mode {self.affinity_mode!r}")

    @property
    def padding(self):
        return (self.kernel_size - 1) // 2


def _check_finite(t, name):
    if not torch.isfinite(t).all():
        raise InvalidInput(f"{name} contains non-finite values")


def _shifted(x, kernel_size):
    """Yield the zero-padded input seen at each window offset, row-major."""
    r = (kernel_size - 1) // 2
    h, w = x.shape[-2:]
    xp = F.pad(x, (r, r, r, r))
    for dy in range(kernel_size):
        for dx in range(kernel_size):
            yield xp[..., dy:dy + h, dx:dx + w]


def _valid_range(offset, size):
    # outputs [lo, hi) read inputs [lo + offset, hi + offset) inside the image
    return max(0, -offset), min(size, size - offset)


class _DistanceFunction(torch.autograd.Function):
    """``||f_i - f_j||^2`` per window offset; off-image neighbours are zero."""

    @staticmethod
    def forward(ctx, f, k):
        n, _, h, w = f.shape
        r = k // 2
        sq = (f * f).sum(dim=1)  # distance to a zero-padded neighbour
        d2 = sq.unsqueeze(1).repeat(1, k * k, 1, 1)
        for j in range(k * k):
            oy, ox = j // k - r, j % k - r
            y0, y1 = _valid_range(oy, h)
            x0, x1 = _valid_range(ox, w)
            diff = f[..., y0 + oy:y1 + oy, x0 + ox:x1 + ox] - f[..., y0:y1, x0:x1]
            d2[:, j, y0:y1, x0:x1] = (diff * diff).sum(dim=1)
        ctx.k = k
        ctx.save_for_backward(f)
        return d2

    @staticmethod
    @torch.autograd.function.once_differentiable
    def backward(ctx, grad):
        (f,) = ctx.saved_tensors
        k = ctx.k
        h, w = f.shape[-2:]
        r = k // 2
        # every offset first treated as off-image, then corrected inside
        grad_f = 2 * f * grad.sum(dim=1, keepdim=True)
        for j in range(k * k):
            oy, ox = j // k - r, j % k - r
            y0, y1 = _valid_range(oy, h)
            x0, x1 = _valid_range(ox, w)
            g = grad[:, j:j + 1, y0:y1, x0:x1]
            center = f[..., y0:y1, x0:x1]
            neighbour = f[..., y0 + oy:y1 + oy, x0 + ox:x1 + ox]
            t = 2 * (neighbour - center) * g
            grad_f[..., y0 + oy:y1 + oy, x0 + ox:x1 + ox] += t
            grad_f[..., y0:y1, x0:x1] -= t + 2 * center * g
        return grad_f, None


def guidance_distances(guidance, kernel_size=3):
    """Squared feature distance ``||f_i - f_j||^2`` for every window offset.

    Returns ``(N, k*k, H, W)``; offsets are ordered row-major and positions
    outside the image see zero-padded guidance.
    """
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise InvalidParameter(f"kernel_size must be odd, got {kernel_size}")
    _check_finite(guidance, "guidance")
    return _DistanceFunction.apply(guidance, kernel_size)


def _affinity(dist2, sigma):
    # (N, kk, H, W) x (S,) -> (N, S, kk, H, W)
    scale = (0.5 / sigma**2).reshape(1, -1, 1, 1, 1)
    return torch.exp(-dist2.unsqueeze(1) * scale)


def gaussian_affinity(guidance, sigma, kernel_size=3):
    """Gaussian affinity between every pixel and the members of its window.

    Args:
        guidance: ``(N, D, H, W)`` guidance features.
        sigma: positive scalar or 1-d tensor of per-filter bandwidths.
        kernel_size: odd window size ``k``.

    Returns:
        ``(N, S, k, k, H, W)`` tensor where ``S`` is the number of sigmas
        (1 for a scalar). Entry ``[n, s, dy, dx, y, x]`` is
        ``K(f[y, x], f[y + dy - r, x + dx - r])`` with ``r = k // 2``.
    """
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise InvalidParameter(f"kernel_size must be odd, got {kernel_size}")
    sigma = _as_sigma(sigma, guidance)
    n, _, h, w = guidance.shape
    aff = _affinity(guidance_distances(guidance, kernel_size), sigma)
    return aff.view(n, sigma.numel(), kernel_size, kernel_size, h, w)


def _as_sigma(sigma, like):
    sigma = torch.as_tensor(sigma, dtype=like.dtype, device=like.device).reshape(-1)
    if not (sigma > 0).all():
        raise InvalidParameter("sigma must be positive")
    return sigma


def _offset_products(x, weight):
    # (N, k*k, C_out, H, W): slot j holds W[:, :, j] . x at every pixel
    n, c_in, h, w = x.shape
    c_out, _, k, _ = weight.shape
    stacked = weight.permute(2, 3, 0, 1).reshape(k * k * c_out, c_in)
    u = torch.matmul(stacked, x.reshape(n, c_in, h * w))
    return u.view(n, k * k, c_out, h, w), stacked


class _PacFunction(torch.autograd.Function):
    """Gaussian-modulated convolution with a hand-derived backward.

    Inputs are the feature map ``x``, the window distances ``d2`` from
    :func:`guidance_distances` and ``c = 1 / (2 sigma^2)`` per filter (or one
    shared value). Every per-offset product ``W_j . x`` comes from a single
    matmul; the window sum then adds shifted views of it over the region where
    the offset stays inside the image, which is exactly zero padding.
    """

    @staticmethod
    def forward(ctx, x, d2, weight, c):
        h, w = x.shape[-2:]
        k = weight.shape[-1]
        r = k // 2
        u, stacked = _offset_products(x, weight)
        # (N, k*k, C_out or 1, H, W)
        aff = torch.exp(d2.unsqueeze(2) * (-c).view(1, 1, -1, 1, 1))
        center = (k * k) // 2
        out = aff[:, center] * u[:, center]
        for j in range(k * k):
            if j == center:
                continue
            oy, ox = j // k - r, j % k - r
            y0, y1 = _valid_range(oy, h)
            x0, x1 = _valid_range(ox, w)
            out[..., y0:y1, x0:x1].addcmul_(
                aff[:, j, :, y0:y1, x0:x1], u[:, j, :, y0 + oy:y1 + oy, x0 + ox:x1 + ox]
            )
        ctx.save_for_backward(x, d2, c, u, aff, stacked)
        return out

    @staticmethod
    @torch.autograd.function.once_differentiable
    def backward(ctx, grad):
        x, d2, c, u, aff, stacked = ctx.saved_tensors
        n, c_out, h, w = grad.shape
        kk = d2.shape[1]
        k = int(round(kk ** 0.5))
        c_in = x.shape[1]
        r = k // 2
        need_x, need_d2, need_w, need_c = ctx.needs_input_grad

        # gradient w.r.t. each offset product, laid out in input coordinates
        ga = grad.unsqueeze(1) * aff
        grad_u = torch.empty_like(u)
        d2_src = torch.zeros_like(d2) if need_c else None
        for j in range(kk):
            oy, ox = j // k - r, j % k - r
            y0, y1 = _valid_range(oy, h)
            x0, x1 = _valid_range(ox, w)
            gj = grad_u[:, j]
            gj[..., y0 + oy:y1 + oy, x0 + ox:x1 + ox] = ga[:, j, :, y0:y1, x0:x1]
            # inputs never read through this offset get no gradient
            if oy > 0:
                gj[..., :oy, :] = 0
            elif oy < 0:
                gj[..., h + oy:, :] = 0
            if ox > 0:
                gj[..., :, :ox] = 0
            elif ox < 0:
                gj[..., :, w + ox:] = 0
            if need_c:
                d2_src[:, j, y0 + oy:y1 + oy, x0 + ox:x1 + ox] = d2[:, j, y0:y1, x0:x1]

        grad_d2 = grad_c = None
        if need_d2 or need_c:
            prod = grad_u * u  # dL/daff * aff, input coordinates
            if need_c:
                grad_c = -torch.einsum("nkohw,nkhw->o", prod, d2_src)
                if c.numel() == 1:
                    grad_c = grad_c.sum().reshape(c.shape)
            if need_d2:
                cvec = c.expand(c_out) if c.numel() == 1 else c
                q = torch.einsum("nkohw,o->nkhw", prod, cvec)
                grad_d2 = torch.zeros_like(d2)
                for j in range(kk):
                    oy, ox = j // k - r, j % k - r
                    y0, y1 = _valid_range(oy, h)
                    x0, x1 = _valid_range(ox, w)
                    grad_d2[:, j, y0:y1, x0:x1] = -q[:, j, y0 + oy:y1 + oy, x0 + ox:x1 + ox]

        grad_x = grad_w = None
        gu = grad_u.view(n, kk * c_out, h * w)
        if need_x:
            grad_x = torch.matmul(stacked.t(), gu).view(n, c_in, h, w)
        if need_w:
            gw = torch.matmul(gu, x.reshape(n, c_in, h * w).transpose(1, 2)).sum(dim=0)
            grad_w = gw.view(k, k, c_out, c_in).permute(2, 3, 0, 1).contiguous()
        return grad_x, grad_d2, grad_w, grad_c


def pac_forward(input, guidance, weight, bias=None, sigma=1.0, affinity_mode="gaussian",
                distances=None):
    """Stride-1, zero-padded pixel-adaptive convolution.

    Args:
        input: ``(N, C_in, H, W)``.
        guidance: ``(N, D, H, W)`` or ``None``. ``None`` means ``K == 1``.
        weight: ``(C_out, C_in, k, k)`` with odd ``k``.
        bias: ``(C_out,)`` or ``None``.
        sigma: scalar or ``(C_out,)`` positive bandwidths.
        affinity_mode: ``"gaussian"`` or ``"constant_one"``.
        distances: optional precomputed ``guidance_distances(guidance, k)``,
            shared by layers that read the same guidance map.

    Returns:
        ``(N, C_out, H, W)``.
    """
    if affinity_mode not in AFFINITY_MODES:
        raise InvalidParameter(f"unknown affinity_mode {affinity_mode!r}")
    c_out, c_in, k, k2 = weight.shape
    if k != k2 or k % 2 == 0:
        raise InvalidParameter(f"weight must have an odd square kernel, got {k}x{k2}")
    n, c, h, w = input.shape
    if c != c_in:
        raise ShapeMismatch(f"input has {c} channels, weight expects {c_in}")

    aff_scale = None
    if guidance is not None and affinity_mode == "gaussian":
        if guidance.shape[0] != n or tuple(guidance.shape[-2:]) != (h, w):
            raise ShapeMismatch(
                f"guidance {tuple(guidance.shape)} does not match input {tuple(input.shape)}"
            )
        sigma = _as_sigma(sigma, input)
        if sigma.numel() not in (1, c_out):
            raise ShapeMismatch(f"expected 1 or {c_out} sigmas, got {sigma.numel()}")
        if distances is None:
            distances = guidance_distances(guidance, k)
        aff_scale = 0.5 / sigma**2

    if aff_scale is None:
        out = None
        for j, shifted in enumerate(_shifted(input, k)):
            dy, dx = divmod(j, k)
            term = F.conv2d(shifted, weight[:, :, dy:dy + 1, dx:dx + 1])
            out = term if out is None else out + term
    else:
        out = _PacFunction.apply(input, distances, weight, aff_scale)

    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1)
    return out


class PacConv2d(nn.Module):
    """Pixel-adaptive convolution layer with learnable per-filter ``sigma``.

    ``sigma`` is stored as ``log_sigma`` so it stays positive under gradient
    descent. The ``weight``/``bias`` names match :class:`torch.nn.Conv2d` so
    state dicts can be shared with a standard convolution of the same shape.
    """

    def __init__(self, spec: PACLayerSpec):
        super().__init__()
        self.spec = spec
        k = spec.kernel_size
        self.weight = nn.Parameter(torch.empty(spec.out_channels, spec.in_channels, k, k))
        self.bias = nn.Parameter(torch.zeros(spec.out_channels))
        self.log_sigma = nn.Parameter(torch.full((spec.out_channels,), math.log(spec.sigma_init)))
        nn.init.xavier_uniform_(self.weight)

    @property
    def sigma(self):
        return self.log_sigma.exp()

    def forward(self, x, guidance=None, distances=None):
        return pac_forward(
            x, guidance, self.weight, self.bias, self.sigma, self.spec.affinity_mode,
            distances=distances,
        )

    def extra_repr(self):
        s = self.spec
        return (
            f"{s.in_channels}, {s.out_channels}, kernel_size={s.kernel_size}, "
            f"affinity_mode={s.affinity_mode}"
        )
