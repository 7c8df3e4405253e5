"""Objective terms of the semantic-guided CycleGAN.

All functions take and return torch tensors so they can sit inside the
training graph; scalar results are 0-d tensors.
"""

import math
from dataclasses import asdict, dataclass, fields

import torch

from .errors import NumericalError, ShapeMismatch

EPS = 1e-7


def feat_map_loss(stack_x, stack_y, mode="rmse"):
    """Feature-map distance between two guidance stacks.

    ``mode="rmse"`` sums the per-scale root-mean-square error,
    ``sum_s sqrt(mean((f_s(x) - f_s(y))^2))``; ``mode="mse"`` drops the root.
    The mean runs over every element of a scale, batch included.
    """
    if len(stack_x) != len(stack_y):
        raise ShapeMismatch(f"stacks have {len(stack_x)} and {len(stack_y)} scales")
    if mode not in ("rmse", "mse"):
        raise ValueError(f"unknown feature-map loss mode {mode!r}")
    total = 0.0
    for s, (fx, fy) in enumerate(zip(stack_x, stack_y)):
        if fx.shape != fy.shape:
            raise ShapeMismatch(f"scale {s}: {tuple(fx.shape)} vs {tuple(fy.shape)}")
        mse = ((fx - fy) ** 2).mean()
        # sqrt has an infinite slope at 0; identical maps contribute 0 without NaN grads
        total = total + (_safe_sqrt(mse) if mode == "rmse" else mse)
    return torch.as_tensor(total)


def _safe_sqrt(x):
    if x.requires_grad:
        return torch.where(x > 0, torch.sqrt(torch.clamp(x, min=1e-30)), torch.zeros_like(x))
    return torch.sqrt(x)


def seg_loss(stack_a, stack_a_rec, stack_b, stack_b_rec, stack_ab, stack_ba, mode="rmse"):
    """``(l_seg1, l_seg2)`` from precomputed guidance stacks.

    ``l_seg1`` compares each real image with its cycle reconstruction,
    ``l_seg2`` compares each real image with its direct translation.
    """
    l_seg1 = feat_map_loss(stack_a, stack_a_rec, mode) + feat_map_loss(stack_b, stack_b_rec, mode)
    l_seg2 = feat_map_loss(stack_a, stack_ab, mode) + feat_map_loss(stack_b, stack_ba, mode)
    return l_seg1, l_seg2


def seg_loss_images(a, a_rec, b, b_rec, ab, ba, extract, mode="rmse"):
    """:func:`seg_loss` on images; ``extract`` maps an image batch to its stack."""
    shapes = {tuple(t.shape) for t in (a, a_rec, b, b_rec, ab, ba)}
    if len(shapes) != 1:
        raise ShapeMismatch(f"images disagree in shape: {sorted(shapes)}")
    return seg_loss(extract(a), extract(a_rec), extract(b), extract(b_rec),
                    extract(ab), extract(ba), mode)


def l1(x, y):
    """Mean absolute error per element."""
    if x.shape != y.shape:
        raise ShapeMismatch(f"{tuple(x.shape)} vs {tuple(y.shape)}")
    return (x - y).abs().mean()


def cycle_loss(a, a_rec, b, b_rec, l_seg=0.0, lambda_cyc=10.0, lambda_seg=1.0):
    """Weighted cycle-consistency loss ``lambda_cyc * (L1_A + L1_B) + lambda_seg * L_seg``."""
    return lambda_cyc * (l1(a, a_rec) + l1(b, b_rec)) + lambda_seg * l_seg


def discriminator_loss(real_probs, fake_probs, eps=EPS):
    """``-[mean log D(real) + mean log(1 - D(fake))]`` with clamped probabilities."""
    real = torch.clamp(real_probs, eps, 1 - eps)
    fake = torch.clamp(fake_probs, eps, 1 - eps)
    return -(torch.log(real).mean() + torch.log1p(-fake).mean())


def generator_adversarial_loss(fake_probs, eps=EPS):
    """Non-saturating generator loss ``-mean log D(fake)``."""
    return -torch.log(torch.clamp(fake_probs, eps, 1 - eps)).mean()


def adversarial_loss(real_probs, fake_probs, eps=EPS):
    """``(d_loss, g_loss)`` for one discriminator; probabilities clamped to ``[eps, 1 - eps]``."""
    return discriminator_loss(real_probs, fake_probs, eps), generator_adversarial_loss(fake_probs, eps)


@dataclass
class LossBreakdown:
    """Per-step loss components as plain floats.

    ``total`` is the generator objective; the discriminator losses are logged
    alongside but are not part of it.
    """

    l_cycle_l1_forward: float = 0.0
    l_cycle_l1_backward: float = 0.0
    l_seg1: float = 0.0
    l_seg2: float = 0.0
    l_adv_ab: float = 0.0
    l_adv_ba: float = 0.0
    d_loss_a: float = 0.0
    d_loss_b: float = 0.0
    total: float = 0.0

    COMPONENTS = ("l_cycle_l1_forward", "l_cycle_l1_backward", "l_seg1", "l_seg2",
                  "l_adv_ab", "l_adv_ba")

    @classmethod
    def columns(cls):
        return [f.name for f in fields(cls)]

    def as_row(self, step):
        return {"step": step, **asdict(self)}

    def check_finite(self, step=None):
        for name, value in asdict(self).items():
            if not math.isfinite(value):
                raise NumericalError(name, step)


def l_cycle(b: LossBreakdown, lambda_cyc=10.0, lambda_seg=1.0):
    """Weighted cycle term reassembled from logged components."""
    return (lambda_cyc * (b.l_cycle_l1_forward + b.l_cycle_l1_backward)
            + lambda_seg * (b.l_seg1 + b.l_seg2))


def total_objective(components: LossBreakdown, lambda_cyc=10.0, lambda_seg=1.0):
    """Generator objective ``L_adv(AB) + L_adv(BA) + L_cyc`` from logged components."""
    for name in LossBreakdown.COMPONENTS:
        if not math.isfinite(getattr(components, name)):
            raise NumericalError(name)
    return components.l_adv_ab + components.l_adv_ba + l_cycle(components, lambda_cyc, lambda_seg)
