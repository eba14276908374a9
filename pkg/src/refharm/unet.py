"""Small U-Net trunk shared by the reflectance generator and the harmonizer."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


def default_channels(base: int, depth: int = 4) -> list[int]:
    # Full resolution and the first stage keep the base width; deeper stages
    # double once and stay there, which keeps CPU training cheap at 32x32.
    return [base, base] + [2 * base] * (depth - 1)


class UNet(nn.Module):
    """``depth`` stride-2 down stages and as many upsampling stages with skips.

    Returns the final decoder feature map (B, channels[0], H, W); owners
    attach their own output heads. H and W must be divisible by 2**depth.
    """

    def __init__(self, in_channels: int, base: int = 32, depth: int = 4, channels=None):
        super().__init__()
        chans = list(channels or default_channels(base, depth))
        self.depth = len(chans) - 1
        self.stem = nn.Conv2d(in_channels, chans[0], 3, padding=1)
        self.downs = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], 4, stride=2, padding=1) for i in range(self.depth))
        self.ups = nn.ModuleList(
            nn.Conv2d(chans[i + 1] + chans[i], chans[i], 3, padding=1)
            for i in reversed(range(self.depth)))
        self.out_channels = chans[0]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.leaky_relu(self.stem(x), 0.2)
        skips = [x]
        for down in self.downs:
            x = F.leaky_relu(down(x), 0.2)
            skips.append(x)
        skips.pop()
        for up in self.ups:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = F.leaky_relu(up(torch.cat([x, skips.pop()], dim=1)), 0.2)
        return x
