"""Conditional patch discriminator (70x70 receptive field, least-squares use).

Scores concatenated (source, target) image pairs patch-wise; the output is
a score map, not a single logit.
"""

from __future__ import annotations

import torch
from torch import nn

from .exceptions import ShapeError
from .generator import init_gan_weights


class PatchDiscriminator(nn.Module):
    """Three stride-2 stages plus two stride-1 stages; instance-normalized."""

    def __init__(self, in_channels: int = 6, base_width: int = 64, n_layers: int = 3):
        super().__init__()
        layers = [
            nn.Conv2d(in_channels, base_width, kernel_size=4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
        ]
        width = base_width
        for i in range(1, n_layers):
            prev, width = width, min(base_width * 2**i, 512)
            layers += [
                nn.Conv2d(prev, width, kernel_size=4, stride=2, padding=1),
                nn.InstanceNorm2d(width),
                nn.LeakyReLU(0.2, inplace=True),
            ]
        prev, width = width, min(base_width * 2**n_layers, 512)
        layers += [
            nn.Conv2d(prev, width, kernel_size=4, stride=1, padding=1),
            nn.InstanceNorm2d(width),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(width, 1, kernel_size=4, stride=1, padding=1),
        ]
        self.in_channels = in_channels
        self.model = nn.Sequential(*layers)
        init_gan_weights(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(
                f"expected (B, {self.in_channels}, H, W) input, got {tuple(x.shape)}"
            )
        return self.model(x)
