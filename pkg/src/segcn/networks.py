"""Semantic-guided UNet generators and patch discriminators.

Both generators share one architecture: four contracting and four expanding
blocks of three 3x3 convolutions (GroupNorm + ELU each) with a residual skip
across every block, 2x2 max pooling between contracting stages and nearest
upsampling followed by a 3x3 convolution on the way back up. Every block sits
at one guidance scale and reads the adapted semantic map of that scale.

``conv_mode``/``guidance_mode`` select the ablations:

    pixel_adaptive + multiscale      full model
    standard       + multiscale      guidance concatenated to block inputs
    pixel_adaptive + final_map_only  only the final segmentation map guides
    standard       + none            plain CycleGAN generator
"""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError
from .pac import PACLayerSpec, PacConv2d, guidance_distances

CONV_MODES = ("pixel_adaptive", "standard")
GUIDANCE_MODES = ("multiscale", "final_map_only", "none")


def norm_groups(channels, max_groups=8):
    """Group count for GroupNorm: 8, or the channel count when smaller."""
    if channels < max_groups:
        return channels
    if channels % max_groups:
        raise ConfigError(f"{channels} channels are not divisible into {max_groups} groups")
    return max_groups


def xavier_init(module):
    """Xavier-uniform weights and zero biases for every conv in ``module``."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, PacConv2d)):
            nn.init.xavier_uniform_(m.weight)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


@dataclass(frozen=True)
class GeneratorSpec:
    widths: tuple = (16, 32, 64, 128)
    layers_per_block: int = 3
    kernel_size: int = 3
    in_channels: int = 3
    out_channels: int = 3
    conv_mode: str = "pixel_adaptive"
    guidance_mode: str = "multiscale"
    affinity_mode: str = "gaussian"
    sigma_init: float = 1.0
    guidance_channels: int = 8
    # channels of the raw semantic map feeding each scale's adapter
    semantic_channels: tuple = (8, 16, 32, 64)
    residual: bool = True

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(self.widths))
        object.__setattr__(self, "semantic_channels", tuple(self.semantic_channels))
        if self.conv_mode not in CONV_MODES:
            raise ConfigError(f"unknown conv_mode {self.conv_mode!r}")
        if self.guidance_mode not in GUIDANCE_MODES:
            raise ConfigError(f"unknown guidance_mode {self.guidance_mode!r}")
        if len(self.widths) < 1 or self.layers_per_block < 1:
            raise ConfigError("need at least one stage and one layer per block")
        if self.guided and len(self.semantic_channels) != len(self.widths):
            raise ConfigError(
                f"{len(self.semantic_channels)} semantic scales for {len(self.widths)} stages"
            )
        if self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be odd")

    @property
    def guided(self):
        return self.guidance_mode != "none"

    @property
    def n_stages(self):
        return len(self.widths)


@dataclass(frozen=True)
class DiscriminatorSpec:
    widths: tuple = (16, 32, 64, 128)
    in_channels: int = 3
    negative_slope: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(self.widths))


class GuidanceAdapter(nn.Module):
    """3x3 conv -> 1x1 conv -> GroupNorm -> ELU on one semantic map."""

    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.conv3 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.conv1 = nn.Conv2d(out_channels, out_channels, 1)
        self.norm = nn.GroupNorm(norm_groups(out_channels), out_channels)

    def forward(self, x):
        return F.elu(self.norm(self.conv1(self.conv3(x))))


def adapt_guidance(stack, adapters):
    """Run each scale of a guidance stack through its own adapter."""
    if len(stack) != len(adapters):
        raise ConfigError(f"{len(adapters)} adapters for a stack of {len(stack)} maps")
    return [adapter(f) for adapter, f in zip(adapters, stack)]


class ConvBlock(nn.Module):
    """``n_layers`` x (conv -> GroupNorm -> ELU) with an optional residual skip."""

    def __init__(self, in_channels, out_channels, n_layers=3, kernel_size=3,
                 pixel_adaptive=False, affinity_mode="gaussian", sigma_init=1.0,
                 residual=True):
        super().__init__()
        self.pixel_adaptive = pixel_adaptive
        self.kernel_size = kernel_size
        self.residual = residual
        convs, norms = [], []
        c = in_channels
        for _ in range(n_layers):
            if pixel_adaptive:
                conv = PacConv2d(PACLayerSpec(c, out_channels, kernel_size, sigma_init, affinity_mode))
            else:
                conv = nn.Conv2d(c, out_channels, kernel_size, padding=kernel_size // 2)
            convs.append(conv)
            norms.append(nn.GroupNorm(norm_groups(out_channels), out_channels))
            c = out_channels
        self.convs = nn.ModuleList(convs)
        self.norms = nn.ModuleList(norms)
        if in_channels != out_channels:
            self.skip = nn.Conv2d(in_channels, out_channels, 1)
        else:
            self.skip = nn.Identity()

    def forward(self, x, guidance=None):
        h = x
        distances = None
        if self.pixel_adaptive and guidance is not None:
            distances = guidance_distances(guidance, self.kernel_size)
        for conv, norm in zip(self.convs, self.norms):
            if self.pixel_adaptive:
                h = conv(h, guidance, distances=distances)
            else:
                h = conv(h)
            h = F.elu(norm(h))
        if self.residual:
            h = h + self.skip(x)
        return h


class Generator(nn.Module):
    """Semantic-guided UNet mapping an image in [-1, 1] to an image in [-1, 1]."""

    def __init__(self, spec: GeneratorSpec = GeneratorSpec()):
        super().__init__()
        self.spec = spec
        pac = spec.conv_mode == "pixel_adaptive"
        concat = spec.guided and not pac
        g = spec.guidance_channels if concat else 0
        w = spec.widths

        def block(cin, cout):
            return ConvBlock(cin + g, cout, spec.layers_per_block, spec.kernel_size,
                             pixel_adaptive=pac, affinity_mode=spec.affinity_mode,
                             sigma_init=spec.sigma_init, residual=spec.residual)

        self.adapters = nn.ModuleList(
            [GuidanceAdapter(c, spec.guidance_channels) for c in spec.semantic_channels]
            if spec.guided else []
        )
        self.down = nn.ModuleList()
        c = spec.in_channels
        for width in w:
            self.down.append(block(c, width))
            c = width
        # the deepest expanding block works at the bottom resolution without a skip
        self.up_convs = nn.ModuleList()
        self.up = nn.ModuleList([block(w[-1], w[-1])])
        for s in range(len(w) - 2, -1, -1):
            self.up_convs.append(nn.Conv2d(w[s + 1], w[s], 3, padding=1))
            self.up.append(block(2 * w[s], w[s]))
        self.head = nn.Conv2d(w[0], spec.out_channels, 1)
        self._concat = concat
        xavier_init(self)

    def forward(self, x, stack=None):
        spec = self.spec
        guides = [None] * spec.n_stages
        if spec.guided:
            if stack is None or len(stack) != spec.n_stages:
                n = 0 if stack is None else len(stack)
                raise ConfigError(f"generator needs {spec.n_stages} guidance maps, got {n}")
            for s, f in enumerate(stack):
                expected = (x.shape[-2] >> s, x.shape[-1] >> s)
                if tuple(f.shape[-2:]) != expected:
                    raise ConfigError(
                        f"guidance scale {s} is {tuple(f.shape[-2:])}, stage expects {expected}"
                    )
            guides = adapt_guidance(stack, self.adapters)

        def run(block, h, s):
            if self._concat:
                return block(torch.cat([h, guides[s]], dim=1))
            return block(h, guides[s])

        skips = []
        h = x
        last = spec.n_stages - 1
        for s, block in enumerate(self.down):
            h = run(block, h, s)
            skips.append(h)
            if s < last:
                h = F.max_pool2d(h, 2)
        h = run(self.up[0], h, last)
        for i, (up_conv, block) in enumerate(zip(self.up_convs, self.up[1:])):
            s = last - 1 - i
            h = up_conv(F.interpolate(h, scale_factor=2, mode="nearest"))
            h = run(block, torch.cat([h, skips[s]], dim=1), s)
        return torch.tanh(self.head(h))


def generator_forward(image, stack, generator):
    """Functional alias of ``generator(image, stack)``."""
    return generator(image, stack)


class Discriminator(nn.Module):
    """Patch discriminator: stride-2 convs with LeakyReLU and a sigmoid head."""

    def __init__(self, spec: DiscriminatorSpec = DiscriminatorSpec()):
        super().__init__()
        self.spec = spec
        layers = []
        c = spec.in_channels
        for width in spec.widths:
            layers += [nn.Conv2d(c, width, 4, stride=2, padding=1),
                       nn.LeakyReLU(spec.negative_slope)]
            c = width
        self.body = nn.Sequential(*layers)
        self.head = nn.Conv2d(c, 1, 3, padding=1)
        xavier_init(self)

    def forward(self, x):
        return torch.sigmoid(self.head(self.body(x)))


def discriminator_forward(image, discriminator):
    return discriminator(image)


def count_parameters(module):
    return sum(p.numel() for p in module.parameters())
