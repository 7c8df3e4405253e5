"""Frozen semantic network and multiscale guidance extraction.

The semantic network is a small residual UNet (standard convolutions, half the
generator widths) trained once on binary structure masks and then frozen. Its
contracting-path stage outputs, min-max normalised per channel, form the
guidance stack consumed by the generators and by the feature-map loss.
"""

import hashlib
import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, InvalidInput, ShapeMismatch
from .networks import ConvBlock, xavier_init

log = logging.getLogger(__name__)


class SemanticNet(nn.Module):
    """Residual UNet predicting a single-channel structure logit map.

    Inputs are RGB images scaled to [0, 1].
    """

    def __init__(self, widths=(8, 16, 32, 64), layers_per_block=3, in_channels=3):
        super().__init__()
        self.widths = tuple(widths)
        w = self.widths
        self.down = nn.ModuleList()
        c = in_channels
        for width in w:
            self.down.append(ConvBlock(c, width, layers_per_block))
            c = width
        self.up_convs = nn.ModuleList()
        self.up = nn.ModuleList([ConvBlock(w[-1], w[-1], layers_per_block)])
        for s in range(len(w) - 2, -1, -1):
            self.up_convs.append(nn.Conv2d(w[s + 1], w[s], 3, padding=1))
            self.up.append(ConvBlock(2 * w[s], w[s], layers_per_block))
        self.head = nn.Conv2d(w[0], 1, 1)
        xavier_init(self)

    @property
    def n_stages(self):
        return len(self.widths)

    def encode(self, x):
        """Raw (unnormalised) output of every contracting stage."""
        feats = []
        h = x
        for s, block in enumerate(self.down):
            h = block(h)
            feats.append(h)
            if s < self.n_stages - 1:
                h = F.max_pool2d(h, 2)
        return feats

    def forward(self, x):
        feats = self.encode(x)
        h = self.up[0](feats[-1])
        for i, (up_conv, block) in enumerate(zip(self.up_convs, self.up[1:])):
            s = self.n_stages - 2 - i
            h = up_conv(F.interpolate(h, scale_factor=2, mode="nearest"))
            h = block(torch.cat([h, feats[s]], dim=1))
        return self.head(h)

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self


def parameter_checksum(module):
    """SHA-256 over every parameter and buffer, in state-dict order."""
    digest = hashlib.sha256()
    for name, t in module.state_dict().items():
        digest.update(name.encode())
        digest.update(t.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def minmax_normalize(x, eps=1e-12):
    """Per-sample, per-channel min-max scaling to [0, 1]; constant channels -> 0."""
    lo = x.amin(dim=(-2, -1), keepdim=True)
    hi = x.amax(dim=(-2, -1), keepdim=True)
    span = hi - lo
    flat = span <= eps
    out = (x - lo) / torch.where(flat, torch.ones_like(span), span)
    return torch.where(flat, torch.zeros_like(out), out)


def _check_divisible(image, n_stages):
    factor = 2 ** (n_stages - 1)
    h, w = image.shape[-2:]
    if h % factor or w % factor:
        raise ShapeMismatch(f"image size {h}x{w} is not divisible by {factor}")


def extract_multiscale_features(image, net):
    """Normalised guidance stack of an image batch.

    Args:
        image: ``(N, 3, H, W)`` in [0, 1] with H, W divisible by ``2**(S-1)``.
        net: the semantic network.

    Returns:
        list of S tensors; stage ``s`` is ``(N, C_s, H / 2**s, W / 2**s)``
        (zero-based ``s``) with values in [0, 1].
    """
    _check_divisible(image, net.n_stages)
    if not torch.isfinite(image).all():
        raise InvalidInput("guidance input contains non-finite values")
    stack = [minmax_normalize(f) for f in net.encode(image)]
    for f in stack:
        assert f.min() >= 0 and f.max() <= 1, "guidance left [0, 1]"
    return stack


def extract_final_map_stack(image, net):
    """Guidance built from the final probability map only, pooled to each scale."""
    _check_divisible(image, net.n_stages)
    prob = torch.sigmoid(net(image))
    return [prob if s == 0 else F.avg_pool2d(prob, 2**s) for s in range(net.n_stages)]


def semantic_stack(image_pm1, net, guidance_mode):
    """Guidance for a generator call on an image batch in [-1, 1]."""
    if guidance_mode == "none":
        return None
    image01 = (image_pm1 + 1) / 2
    if guidance_mode == "multiscale":
        return extract_multiscale_features(image01, net)
    if guidance_mode == "final_map_only":
        return extract_final_map_stack(image01, net)
    raise ConfigError(f"unknown guidance_mode {guidance_mode!r}")


def semantic_channels(net, guidance_mode):
    """Channel count of each scale of the stack produced for ``guidance_mode``."""
    if guidance_mode == "final_map_only":
        return (1,) * net.n_stages
    return net.widths


@dataclass
class PretrainConfig:
    epochs: int = 20
    batch_size: int = 8
    learning_rate: float = 2e-3
    seed: int = 0
    widths: tuple = (4, 8, 16, 32)


def predict_masks(net, images01, threshold=0.5, batch_size=32):
    """Binary structure masks ``(N, H, W)`` for images ``(N, 3, H, W)`` in [0, 1]."""
    out = []
    with torch.no_grad():
        for i in range(0, len(images01), batch_size):
            out.append(torch.sigmoid(net(images01[i:i + batch_size])) > threshold)
    return torch.cat(out)[:, 0]


def pretrain_semantic_net(images01, masks, config=PretrainConfig()):
    """Train the semantic network on binary masks with per-pixel BCE, then freeze.

    Args:
        images01: ``(N, 3, H, W)`` float tensor in [0, 1].
        masks: ``(N, H, W)`` or ``(N, 1, H, W)`` binary tensor.
        config: optimisation settings.

    Returns:
        a frozen :class:`SemanticNet`.
    """
    if len(images01) == 0:
        raise InvalidInput("cannot pretrain on an empty dataset")
    if masks.dim() == 3:
        masks = masks[:, None]
    masks = masks.to(images01.dtype)
    if masks.shape[0] != images01.shape[0] or masks.shape[-2:] != images01.shape[-2:]:
        raise ShapeMismatch("images and masks disagree in count or size")

    torch.manual_seed(config.seed)
    net = SemanticNet(config.widths)
    _check_divisible(images01, net.n_stages)
    opt = torch.optim.Adam(net.parameters(), lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    n = len(images01)
    net.train()
    for epoch in range(config.epochs):
        order = torch.from_numpy(rng.permutation(n))
        total = 0.0
        for i in range(0, n, config.batch_size):
            idx = order[i:i + config.batch_size]
            logits = net(images01[idx])
            loss = F.binary_cross_entropy_with_logits(logits, masks[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        log.info("semantic pretrain epoch %d: bce %.4f", epoch + 1, total / n)
    return net.freeze()
