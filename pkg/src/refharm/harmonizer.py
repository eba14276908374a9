"""Reflectance-guided harmonizer: a U-Net over [composite, mask, reflectance]."""
from __future__ import annotations

import torch
import torch.nn as nn

from .unet import UNet

FULL_IMAGE_WEIGHT = 0.1


class Harmonizer(nn.Module):
    def __init__(self, base=32, depth=4):
        super().__init__()
        self.unet = UNet(7, base, depth)
        self.head = nn.Conv2d(self.unet.out_channels, 3, 3, padding=1)

    def forward(self, composite, mask, reflectance):
        x = torch.cat([composite, mask, reflectance], dim=1)
        return torch.sigmoid(self.head(self.unet(x)))


def harmonize(model: Harmonizer, composite, mask, reflectance=None):
    """Harmonized image; only foreground pixels differ from ``composite``.

    ``reflectance=None`` feeds zeros (the unguided baseline). The reflectance
    is zeroed outside the mask before it reaches the network.
    """
    if reflectance is None:
        guide = torch.zeros_like(composite)
    else:
        guide = reflectance * mask
    raw = model(composite, mask, guide)
    return torch.where(mask > 0, raw, composite)


def harmonization_loss(pred, target, mask):
    """Foreground MSE (over |M| * C) plus 0.1 x whole-image MSE."""
    sq = (pred - target) ** 2
    fg = (sq * mask).sum() / (mask.sum() * pred.shape[1]).clamp(min=1.0)
    return fg + FULL_IMAGE_WEIGHT * sq.mean()
