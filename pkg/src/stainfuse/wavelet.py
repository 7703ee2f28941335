"""2D Haar wavelet transform and wavelet-convolution downsampling.

The single-level orthonormal Haar DWT trades spatial resolution for channel
depth: every disjoint 2x2 block becomes one coefficient in each of four
half-resolution subbands. With the 1/2-per-tap normalization the transform
matrix is orthogonal, so energy is conserved exactly and the inverse is the
transpose. ``WTConvLayer`` stacks the four subbands on the channel axis and
applies a learnable 1x1 mix, giving a stride-2 downsampling block with a
full-band receptive field.
"""

from __future__ import annotations

from typing import NamedTuple

import torch
from torch import nn

from .exceptions import ShapeError


class WaveletSubbands(NamedTuple):
    """Subbands of a single-level 2D Haar DWT, each (B, C, H/2, W/2).

    ``ll`` is the half-resolution approximation; ``lh`` carries vertical
    detail (differences across rows), ``hl`` horizontal detail, ``hh``
    diagonal detail.
    """

    ll: torch.Tensor
    lh: torch.Tensor
    hl: torch.Tensor
    hh: torch.Tensor


def _check_input(x: torch.Tensor) -> None:
    if x.dim() != 4:
        raise ShapeError(f"expected a (B, C, H, W) tensor, got shape {tuple(x.shape)}")
    _, _, h, w = x.shape
    if h % 2 != 0:
        raise ShapeError(f"height must be even for the Haar DWT, got H={h}")
    if w % 2 != 0:
        raise ShapeError(f"width must be even for the Haar DWT, got W={w}")


def haar_dwt2d(x: torch.Tensor) -> WaveletSubbands:
    """Orthonormal single-level 2D Haar analysis.

    Each output pixel combines one disjoint 2x2 input block
    ``[[a, b], [c, d]]`` with +-1/2 weights:

        ll = (a + b + c + d) / 2      lh = (a + b - c - d) / 2
        hl = (a - b + c - d) / 2      hh = (a - b - c + d) / 2

    Odd spatial dimensions are rejected rather than padded.
    """
    _check_input(x)
    x00 = x[..., 0::2, 0::2]
    x01 = x[..., 0::2, 1::2]
    x10 = x[..., 1::2, 0::2]
    x11 = x[..., 1::2, 1::2]
    ll = (x00 + x01 + x10 + x11) * 0.5
    lh = (x00 + x01 - x10 - x11) * 0.5
    hl = (x00 - x01 + x10 - x11) * 0.5
    hh = (x00 - x01 - x10 + x11) * 0.5
    return WaveletSubbands(ll, lh, hl, hh)


def haar_idwt2d(s: WaveletSubbands) -> torch.Tensor:
    """Inverse of :func:`haar_dwt2d`; exact up to floating-point rounding."""
    ll, lh, hl, hh = s
    for name, band in zip(("lh", "hl", "hh"), (lh, hl, hh)):
        if band.shape != ll.shape:
            raise ShapeError(
                f"subband {name} has shape {tuple(band.shape)}, "
                f"expected {tuple(ll.shape)} to match ll"
            )
    b, c, h, w = ll.shape
    out = ll.new_empty((b, c, 2 * h, 2 * w))
    out[..., 0::2, 0::2] = (ll + lh + hl + hh) * 0.5
    out[..., 0::2, 1::2] = (ll + lh - hl - hh) * 0.5
    out[..., 1::2, 0::2] = (ll - lh + hl - hh) * 0.5
    out[..., 1::2, 1::2] = (ll - lh - hl + hh) * 0.5
    return out


_ACTIVATIONS = ("leaky_relu", "relu", "linear")


class WTConvLayer(nn.Module):
    """Wavelet downsampling block: Haar DWT -> learnable 1x1 mix -> activation.

    The four subbands are concatenated channel-wise in (ll, lh, hl, hh) order,
    so the mix is a 1x1 convolution from ``4 * in_channels`` to
    ``out_channels``. Output spatial size is exactly half the (even) input
    size; odd inputs raise instead of being padded.

    Args:
        in_channels: channels of the incoming feature map.
        out_channels: channels after subband mixing.
        activation: "leaky_relu" (default, slope 0.2), "relu", or "linear".
        bias: include a bias in the mixing convolution.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        activation: str = "leaky_relu",
        negative_slope: float = 0.2,
        bias: bool = True,
    ):
        super().__init__()
        if in_channels <= 0 or out_channels <= 0:
            raise ValueError("channel counts must be positive")
        if activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {_ACTIVATIONS}, got {activation!r}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.activation = activation
        self.negative_slope = negative_slope
        self.mix = nn.Conv2d(4 * in_channels, out_channels, kernel_size=1, bias=bias)

    def init_ll_identity(self) -> None:
        """Initialize the mix to pass the LL band through unchanged.

        Requires ``out_channels == in_channels``; zeroes the bias. Mainly a
        deterministic starting point for tests and debugging.
        """
        if self.out_channels != self.in_channels:
            raise ValueError("LL-identity init needs out_channels == in_channels")
        with torch.no_grad():
            self.mix.weight.zero_()
            for j in range(self.in_channels):
                self.mix.weight[j, j, 0, 0] = 1.0
            if self.mix.bias is not None:
                self.mix.bias.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(
                f"expected (B, {self.in_channels}, H, W) input, got shape {tuple(x.shape)}"
            )
        bands = haar_dwt2d(x)
        y = self.mix(torch.cat(bands, dim=1))
        if self.activation == "leaky_relu":
            y = nn.functional.leaky_relu(y, negative_slope=self.negative_slope)
        elif self.activation == "relu":
            y = nn.functional.relu(y)
        return y
