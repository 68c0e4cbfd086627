"""Residual-target discriminators and the adversarial losses around them."""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import spectral_norm

LEAK = 0.2


@dataclass
class DiscriminatorConfig:
    widths: list = field(default_factory=lambda: [64, 64, 64, 64, 1])
    kernel: int = 3
    in_channels: int = 4

    def __post_init__(self):
        if len(self.widths) != 5 or self.widths[-1] != 1:
            raise ValueError("discriminator has five conv layers ending in one channel")


class Discriminator(nn.Module):
    """Fully convolutional, stride 1, SN on every conv, BN + LeakyReLU after the first four."""

    def __init__(self, config: DiscriminatorConfig | None = None):
        super().__init__()
        self.config = config = config or DiscriminatorConfig()
        k = config.kernel
        layers = []
        cin = config.in_channels
        for i, cout in enumerate(config.widths):
            layers.append(spectral_norm(nn.Conv2d(cin, cout, k, padding=k // 2), n_power_iterations=1))
            if i < 4:
                layers += [nn.BatchNorm2d(cout), nn.LeakyReLU(LEAK)]
            cin = cout
        self.net = nn.Sequential(*layers)

    @property
    def convs(self):
        return [m for m in self.net if isinstance(m, nn.Conv2d)]

    def logits(self, image, mask):
        if image.shape[-2:] != mask.shape[-2:]:
            raise ValueError(f"image {tuple(image.shape[-2:])} and map {tuple(mask.shape[-2:])} differ in size")
        return self.net(torch.cat([image, mask], dim=1))

    def forward(self, image, mask):
        """Confidence map in (0, 1); high values mark likely prediction errors."""
        return torch.sigmoid(self.logits(image, mask))


@contextmanager
def frozen(module: nn.Module):
    """Temporarily stop gradients into ``module``'s parameters."""
    flags = [p.requires_grad for p in module.parameters()]
    for p in module.parameters():
        p.requires_grad_(False)
    try:
        yield module
    finally:
        for p, f in zip(module.parameters(), flags):
            p.requires_grad_(f)


def _bce_logits(logits, target):
    return F.binary_cross_entropy_with_logits(logits, target, reduction="mean")


def generator_adv_loss(image, pred, y, disc: Discriminator):
    """Push ``D(image, pred)`` toward the (constant) ``D(image, y)``.

    Gradient reaches the generator through ``pred`` only.
    """
    with frozen(disc):
        with torch.no_grad():
            target = disc(image, y)
        return _bce_logits(disc.logits(image, pred), target)


def discriminator_loss(image, pred, y, disc: Discriminator):
    """Residual target ``|pred - y|`` for predictions, zero map for ground truth."""
    pred = pred.detach()
    residual = torch.abs(pred - y)
    loss_pred = _bce_logits(disc.logits(image, pred), residual)
    loss_gt = _bce_logits(disc.logits(image, y), torch.zeros_like(y))
    return loss_pred + loss_gt


@torch.no_grad()
def uncertainty_map(image, pred, disc: Discriminator):
    """Test-time uncertainty: the discriminator's predicted residual."""
    was_training = disc.training
    disc.eval()
    try:
        return disc(image, pred)
    finally:
        disc.train(was_training)
