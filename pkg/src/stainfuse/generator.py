"""Resnet image-to-image generator with multi-scale and attention fusion.

Backbone: 7x7 stem -> two wavelet downsamplings (via the multi-scale
extractor, which is also the pyramid source) -> six residual blocks at 1/4
scale -> two transposed-conv upsamplings -> 7x7 tanh head. On top of the
backbone, the first residual block's output can be fused with pretrained
encoder features through cross-attention, and the outputs of residual
blocks 2-4 receive the extractor's GRU hidden states by addition
(f2 + h3, f3 + h2, f4 + h1).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Tuple

import torch
from torch import nn

from .attention import CrossAttentionFusion
from .exceptions import ShapeError
from .multiscale import HiddenSequence, MultiScaleExtractor

__all__ = [
    "GeneratorConfig",
    "GeneratorFeatureMaps",
    "fuse_hidden",
    "ResnetBlock",
    "StainGenerator",
]


@dataclass
class GeneratorConfig:
    """Architecture and fusion knobs for :class:`StainGenerator`.

    ``fusion_points`` are the residual-block indices (1-based) whose outputs
    receive the hidden states, in (h3, h2, h1) order; ``attention_point`` is
    the block whose output is fused with encoder features.
    """

    input_channels: int = 3
    output_channels: int = 3
    base_width: int = 64
    n_resblocks: int = 6
    fusion_strength: float = 0.2
    use_vmfe: bool = True
    use_attention: bool = True
    attention_point: int = 1
    fusion_points: Tuple[int, int, int] = (2, 3, 4)
    attention_dim: Optional[int] = None
    encoder_channels: int = 256
    gru_kernel: int = 3
    vmfe_downsample: str = "wavelet"

    def __post_init__(self):
        if self.fusion_strength < 0:
            raise ValueError("fusion_strength must be >= 0")
        if self.n_resblocks < 1:
            raise ValueError("need at least one residual block")
        if len(self.fusion_points) != 3 or len(set(self.fusion_points)) != 3:
            raise ValueError("fusion_points must be three distinct block indices")
        points = set(self.fusion_points) | {self.attention_point}
        if min(points) < 1 or max(points) > self.n_resblocks:
            raise ValueError(
                f"fusion/attention points {sorted(points)} must lie in "
                f"[1, {self.n_resblocks}]"
            )

    @property
    def bottleneck_channels(self) -> int:
        return 4 * self.base_width


class GeneratorFeatureMaps(NamedTuple):
    """First four bottleneck-scale feature maps of the residual chain."""

    f1: torch.Tensor
    f2: torch.Tensor
    f3: torch.Tensor
    f4: torch.Tensor


def fuse_hidden(fmaps: GeneratorFeatureMaps, hs: HiddenSequence) -> GeneratorFeatureMaps:
    """Additive fusion: f2 + h3, f3 + h2, f4 + h1; f1 is left untouched."""
    for name, f, h in (("f2", fmaps.f2, hs.h3), ("f3", fmaps.f3, hs.h2), ("f4", fmaps.f4, hs.h1)):
        if f.shape != h.shape:
            raise ShapeError(
                f"hidden state for {name} has shape {tuple(h.shape)}, "
                f"expected {tuple(f.shape)}"
            )
    return GeneratorFeatureMaps(fmaps.f1, fmaps.f2 + hs.h3, fmaps.f3 + hs.h2, fmaps.f4 + hs.h1)


class ResnetBlock(nn.Module):
    """Two reflection-padded 3x3 convs with instance norm and a residual add."""

    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, kernel_size=3),
            nn.InstanceNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, kernel_size=3),
            nn.InstanceNorm2d(channels),
        )

    def forward(self, x):
        return x + self.body(x)


def _upsample_block(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.ConvTranspose2d(in_ch, out_ch, kernel_size=3, stride=2, padding=1, output_padding=1),
        nn.InstanceNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


def init_gan_weights(module: nn.Module, std: float = 0.02) -> None:
    """Normal(0, std) init for conv weights, the usual choice for this family."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class StainGenerator(nn.Module):
    """Image translation network producing tanh-bounded 3-channel output.

    ``forward`` needs spatial dims divisible by 4 and, when attention is
    enabled, a guidance feature map already resampled to bottleneck spatial
    size (a learned 1x1 adapter bridges a channel mismatch).
    """

    def __init__(self, cfg: Optional[GeneratorConfig] = None):
        super().__init__()
        self.cfg = cfg = cfg if cfg is not None else GeneratorConfig()
        w = cfg.base_width
        bottleneck = cfg.bottleneck_channels

        self.extractor = MultiScaleExtractor(
            in_channels=cfg.input_channels,
            channels=(w, 2 * w, bottleneck),
            include_gru=cfg.use_vmfe,
            gru_kernel=cfg.gru_kernel,
            downsample_mode=cfg.vmfe_downsample,
        )
        self.resblocks = nn.ModuleList(ResnetBlock(bottleneck) for _ in range(cfg.n_resblocks))
        if cfg.use_attention:
            self.attention = CrossAttentionFusion(
                bottleneck, d=cfg.attention_dim, alpha=cfg.fusion_strength
            )
            if cfg.encoder_channels != bottleneck:
                self.encoder_adapter = nn.Conv2d(cfg.encoder_channels, bottleneck, kernel_size=1)
            else:
                self.encoder_adapter = None
        else:
            self.attention = None
            self.encoder_adapter = None
        self.up1 = _upsample_block(bottleneck, 2 * w)
        self.up2 = _upsample_block(2 * w, w)
        self.head = nn.Sequential(
            nn.ReflectionPad2d(3),
            nn.Conv2d(w, cfg.output_channels, kernel_size=7),
            nn.Tanh(),
        )
        init_gan_weights(self)

    def _decode(self, f: torch.Tensor) -> torch.Tensor:
        return self.head(self.up2(self.up1(f)))

    def _prepare_guidance(self, f: torch.Tensor, encoder_features: Optional[torch.Tensor]):
        if encoder_features is None:
            raise ValueError("attention is enabled but no encoder features were given")
        if self.encoder_adapter is not None:
            encoder_features = self.encoder_adapter(encoder_features)
        if encoder_features.shape != f.shape:
            raise ShapeError(
                f"encoder features have shape {tuple(encoder_features.shape)} after "
                f"adaptation, expected bottleneck shape {tuple(f.shape)}"
            )
        return encoder_features

    def forward(
        self, x: torch.Tensor, encoder_features: Optional[torch.Tensor] = None
    ) -> torch.Tensor:
        pyramid = self.extractor.build_pyramid(x)
        hidden = self.extractor.run_recurrence(pyramid) if self.cfg.use_vmfe else None
        hidden_at = dict(zip(self.cfg.fusion_points, hidden)) if hidden is not None else {}

        f = pyramid.x3
        for i, block in enumerate(self.resblocks, start=1):
            f = block(f)
            if self.attention is not None and i == self.cfg.attention_point:
                f = self.attention(f, self._prepare_guidance(f, encoder_features))
            if i in hidden_at:
                f = f + hidden_at[i]
        return self._decode(f)

    def backbone_forward(self, x: torch.Tensor) -> torch.Tensor:
        """Plain resnet path on the same weights, with all fusion skipped.

        Serves as the reference output for checking that zeroed hidden
        states plus fusion strength 0 reduce ``forward`` to the backbone.
        """
        pyramid = self.extractor.build_pyramid(x)
        f = pyramid.x3
        for block in self.resblocks:
            f = block(f)
        return self._decode(f)
