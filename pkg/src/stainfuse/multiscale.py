"""Wavelet feature pyramid with a convolutional-GRU recurrence over scales.

``MultiScaleExtractor`` builds feature maps at scales 1, 1/2 and 1/4 of the
input through wavelet downsampling, then feeds them coarse-to-fine
(x3, x2, x1) through a ConvGRU. The three hidden states all live at 1/4
scale and are meant to be added onto a generator's bottleneck feature maps.
"""

from __future__ import annotations

from typing import NamedTuple, Optional, Tuple

import torch
from torch import nn

from .exceptions import ShapeError
from .wavelet import WTConvLayer


class MultiScalePyramid(NamedTuple):
    """Feature maps at scales 1, 1/2 and 1/4 of the network input."""

    x1: torch.Tensor
    x2: torch.Tensor
    x3: torch.Tensor


class HiddenSequence(NamedTuple):
    """GRU hidden states after consuming x3, x2, x1 in that order.

    All three share one shape: (B, hidden_channels, H/4, W/4).
    """

    h3: torch.Tensor
    h2: torch.Tensor
    h1: torch.Tensor


class ConvGRUCell(nn.Module):
    """GRU cell with convolutions in place of dense maps.

    Gates: z = sigmoid(conv([x, h])), r = sigmoid(conv([x, h])),
    candidate = tanh(conv([x, r*h])), h' = (1-z)*h + z*candidate.
    """

    def __init__(self, in_channels: int, hidden_channels: int, kernel_size: int = 3):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd to preserve spatial dims")
        padding = kernel_size // 2
        self.in_channels = in_channels
        self.hidden_channels = hidden_channels
        self.conv_gates = nn.Conv2d(
            in_channels + hidden_channels, 2 * hidden_channels, kernel_size, padding=padding
        )
        self.conv_candidate = nn.Conv2d(
            in_channels + hidden_channels, hidden_channels, kernel_size, padding=padding
        )

    def forward(self, x: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.in_channels:
            raise ShapeError(
                f"expected input with {self.in_channels} channels, got {x.shape[1]}"
            )
        if h.shape[1] != self.hidden_channels:
            raise ShapeError(
                f"expected hidden state with {self.hidden_channels} channels, got {h.shape[1]}"
            )
        if x.shape[-2:] != h.shape[-2:]:
            raise ShapeError(
                f"input spatial dims {tuple(x.shape[-2:])} do not match "
                f"hidden state dims {tuple(h.shape[-2:])}"
            )
        gates = torch.sigmoid(self.conv_gates(torch.cat([x, h], dim=1)))
        z, r = gates.split(self.hidden_channels, dim=1)
        candidate = torch.tanh(self.conv_candidate(torch.cat([x, r * h], dim=1)))
        return (1.0 - z) * h + z * candidate


def _avgpool_stack(levels: int) -> nn.Module:
    return nn.Sequential(*[nn.AvgPool2d(2) for _ in range(levels)])


def _wavelet_stack(channels: int, levels: int) -> nn.Module:
    return nn.Sequential(*[WTConvLayer(channels, channels) for _ in range(levels)])


class MultiScaleExtractor(nn.Module):
    """Stem + two wavelet downsamplings + ConvGRU over the resulting pyramid.

    The stem (reflection-padded 7x7 conv, instance norm, ReLU) doubles as a
    resnet-style generator's input stage, so the pyramid can serve directly
    as the generator's downsampling path.

    Args:
        in_channels: image channels.
        channels: widths of x1/x2/x3; x3's width is the bottleneck width.
        hidden_channels: GRU state width; defaults to the bottleneck width.
        include_gru: build the recurrent part. With False only the pyramid
            is available (ablation configuration; fewer parameters).
        downsample_mode: how x1/x2 are brought to 1/4 scale before the GRU,
            "wavelet" (default; more wavelet blocks) or "avgpool".
    """

    def __init__(
        self,
        in_channels: int = 3,
        channels: Tuple[int, int, int] = (64, 128, 256),
        hidden_channels: Optional[int] = None,
        gru_kernel: int = 3,
        include_gru: bool = True,
        downsample_mode: str = "wavelet",
    ):
        super().__init__()
        if downsample_mode not in ("wavelet", "avgpool"):
            raise ValueError(f"unknown downsample_mode {downsample_mode!r}")
        c1, c2, c3 = channels
        hidden = c3 if hidden_channels is None else hidden_channels
        self.in_channels = in_channels
        self.channels = tuple(channels)
        self.hidden_channels = hidden
        self.include_gru = include_gru

        self.stem = nn.Sequential(
            nn.ReflectionPad2d(3),
            nn.Conv2d(in_channels, c1, kernel_size=7),
            nn.InstanceNorm2d(c1),
            nn.ReLU(inplace=True),
        )
        self.down12 = WTConvLayer(c1, c2)
        self.down23 = WTConvLayer(c2, c3)

        if include_gru:
            if downsample_mode == "wavelet":
                self.resample1 = _wavelet_stack(c1, 2)
                self.resample2 = _wavelet_stack(c2, 1)
            else:
                self.resample1 = _avgpool_stack(2)
                self.resample2 = _avgpool_stack(1)
            self.proj1 = nn.Conv2d(c1, hidden, kernel_size=1)
            self.proj2 = nn.Conv2d(c2, hidden, kernel_size=1)
            self.proj3 = nn.Conv2d(c3, hidden, kernel_size=1)
            self.gru = ConvGRUCell(hidden, hidden, kernel_size=gru_kernel)

    def build_pyramid(self, x: torch.Tensor) -> MultiScalePyramid:
        """Stem at full scale, then two wavelet halvings."""
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(
                f"expected (B, {self.in_channels}, H, W) input, got shape {tuple(x.shape)}"
            )
        _, _, h, w = x.shape
        if h % 4 != 0 or w % 4 != 0:
            raise ShapeError(f"spatial dims must be divisible by 4, got {h}x{w}")
        x1 = self.stem(x)
        x2 = self.down12(x1)
        x3 = self.down23(x2)
        return MultiScalePyramid(x1, x2, x3)

    def recurrence_step(self, h: torch.Tensor, x_t: torch.Tensor) -> torch.Tensor:
        """One GRU update; ``x_t`` must already be at 1/4 scale and GRU width."""
        if not self.include_gru:
            raise RuntimeError("extractor built with include_gru=False")
        return self.gru(x_t, h)

    def run_recurrence(self, pyramid: MultiScalePyramid) -> HiddenSequence:
        """Consume x3, x2, x1 (coarse to fine) from a zero initial state."""
        if not self.include_gru:
            raise RuntimeError("extractor built with include_gru=False")
        x3t = self.proj3(pyramid.x3)
        x2t = self.proj2(self.resample2(pyramid.x2))
        x1t = self.proj1(self.resample1(pyramid.x1))
        for name, t in (("x2", x2t), ("x1", x1t)):
            if t.shape[-2:] != x3t.shape[-2:]:
                raise ShapeError(
                    f"resampled {name} has spatial dims {tuple(t.shape[-2:])}, "
                    f"expected {tuple(x3t.shape[-2:])}"
                )
        h = torch.zeros(
            (x3t.shape[0], self.hidden_channels, *x3t.shape[-2:]),
            dtype=x3t.dtype,
            device=x3t.device,
        )
        h3 = self.recurrence_step(h, x3t)
        h2 = self.recurrence_step(h3, x2t)
        h1 = self.recurrence_step(h2, x1t)
        return HiddenSequence(h3, h2, h1)

    def forward(self, x: torch.Tensor):
        pyramid = self.build_pyramid(x)
        hidden = self.run_recurrence(pyramid) if self.include_gru else None
        return pyramid, hidden
