"""Residual single-head cross-attention between two same-shape feature maps.

Queries come from the generator-side map, keys and values from the encoder
side; the attended result is projected back, batch-normalized, scaled and
added onto the generator map:

    out = f_gen + alpha * BN(W_out @ softmax(Q K^T / sqrt(d)) V)

Attention rows are computed in chunks so the N x N matrix (N = H*W) never
has to be materialized whole; chunking is bit-identical to the dense path.
"""

from __future__ import annotations

from typing import Optional

import torch
from torch import nn

from .exceptions import ShapeError


class CrossAttentionFusion(nn.Module):
    """Inject encoder features into a generator feature map.

    Args:
        channels: channel count C of both inputs.
        d: projection width for Q/K/V; defaults to C.
        alpha: fusion strength (>= 0). 0 makes the layer an exact identity
            on the generator input.
        chunk_size: number of query rows processed per attention chunk.
    """

    def __init__(
        self,
        channels: int,
        d: Optional[int] = None,
        alpha: float = 0.2,
        chunk_size: int = 4096,
    ):
        super().__init__()
        d = channels if d is None else d
        if d <= 0:
            raise ValueError(f"projection width d must be positive, got {d}")
        if alpha < 0:
            raise ValueError(f"fusion strength alpha must be >= 0, got {alpha}")
        if chunk_size <= 0:
            raise ValueError("chunk_size must be positive")
        self.channels = channels
        self.d = d
        self.alpha = alpha
        self.chunk_size = chunk_size
        self.q_proj = nn.Conv2d(channels, d, kernel_size=1)
        self.k_proj = nn.Conv2d(channels, d, kernel_size=1)
        self.v_proj = nn.Conv2d(channels, d, kernel_size=1)
        self.out_proj = nn.Conv2d(d, channels, kernel_size=1)
        self.bn = nn.BatchNorm2d(channels)

    def _check(self, f_gen: torch.Tensor, f_enc: torch.Tensor) -> None:
        if f_gen.dim() != 4 or f_gen.shape[1] != self.channels:
            raise ShapeError(
                f"expected (B, {self.channels}, H, W) generator map, got {tuple(f_gen.shape)}"
            )
        if f_enc.shape != f_gen.shape:
            raise ShapeError(
                f"encoder map shape {tuple(f_enc.shape)} does not match "
                f"generator map shape {tuple(f_gen.shape)}"
            )

    def _attend(self, q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        # q, k, v: (B, N, d); softmax rows are independent, so chunking over
        # query rows reproduces the dense result exactly.
        scale = 1.0 / (self.d**0.5)
        outs = []
        for qc in q.split(self.chunk_size, dim=1):
            attn = torch.softmax(torch.bmm(qc, k.transpose(1, 2)) * scale, dim=-1)
            outs.append(torch.bmm(attn, v))
        return torch.cat(outs, dim=1)

    def attention_matrix(self, f_gen: torch.Tensor, f_enc: torch.Tensor) -> torch.Tensor:
        """Full (B, N, N) softmax attention, for inspection and tests."""
        self._check(f_gen, f_enc)
        b, _, h, w = f_gen.shape
        q = self.q_proj(f_gen).flatten(2).transpose(1, 2)
        k = self.k_proj(f_enc).flatten(2).transpose(1, 2)
        return torch.softmax(torch.bmm(q, k.transpose(1, 2)) / (self.d**0.5), dim=-1)

    def forward(self, f_gen: torch.Tensor, f_enc: torch.Tensor) -> torch.Tensor:
        self._check(f_gen, f_enc)
        b, c, h, w = f_gen.shape
        q = self.q_proj(f_gen).flatten(2).transpose(1, 2)  # (B, N, d)
        k = self.k_proj(f_enc).flatten(2).transpose(1, 2)
        v = self.v_proj(f_enc).flatten(2).transpose(1, 2)
        y = self._attend(q, k, v)
        y = y.transpose(1, 2).reshape(b, self.d, h, w)
        return f_gen + self.alpha * self.bn(self.out_proj(y))
