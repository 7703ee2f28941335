"""Training objectives: similarity-weighted L1, least-squares GAN terms.

The adaptive L1 splits both images into a patch grid, embeds corresponding
patches with the frozen target-domain encoder, and scales each patch's mean
absolute error by (alpha + beta * cosine similarity). Low-similarity patches
(poorly aligned ground truth) are down-weighted. Similarities are computed
under stop-gradient: they schedule the weights, they are not a target.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Tuple

import torch
from torch.nn import functional as F

from .exceptions import ShapeError


@dataclass
class AdaptiveL1Config:
    """Weighting and patching knobs for :func:`adaptive_l1_loss`.

    Defaults alpha = beta = 50 make the per-patch weight alpha + beta*sim
    range over [0, 100]; validation rejects combinations that could go
    negative anywhere on sim in [-1, 1].
    """

    alpha: float = 50.0
    beta: float = 50.0
    patch_grid: Tuple[int, int] = (4, 4)
    embed_resize: int | None = None

    def __post_init__(self):
        rows, cols = self.patch_grid
        if rows < 1 or cols < 1:
            raise ValueError("patch_grid entries must be positive")
        if self.alpha - abs(self.beta) < 0:
            raise ValueError(
                f"alpha={self.alpha}, beta={self.beta} allow a negative patch weight "
                "(need alpha >= |beta| so the weight stays >= 0 on sim in [-1, 1])"
            )


def split_patches(x: torch.Tensor, grid: Tuple[int, int]) -> torch.Tensor:
    """(B, C, H, W) -> (B * rows * cols, C, H/rows, W/cols), row-major order."""
    rows, cols = grid
    b, c, h, w = x.shape
    if h % rows != 0 or w % cols != 0:
        raise ShapeError(f"patch grid {rows}x{cols} does not divide spatial dims {h}x{w}")
    ph, pw = h // rows, w // cols
    x = x.reshape(b, c, rows, ph, cols, pw)
    x = x.permute(0, 2, 4, 1, 3, 5)  # (B, rows, cols, C, ph, pw)
    return x.reshape(b * rows * cols, c, ph, pw)


def adaptive_l1_loss(
    gen: torch.Tensor,
    gt: torch.Tensor,
    embed_fn: Callable[[torch.Tensor], torch.Tensor],
    cfg: AdaptiveL1Config,
) -> torch.Tensor:
    """Patch-similarity-weighted L1: mean_i (alpha + beta*sim_i) * meanAbs_i.

    ``embed_fn`` maps a patch batch to embedding vectors (the frozen
    target-domain encoder in production, any stub in tests); similarities
    use normalized embeddings and never carry gradient.
    """
    if gen.shape != gt.shape:
        raise ShapeError(
            f"generated and ground-truth shapes differ: {tuple(gen.shape)} vs {tuple(gt.shape)}"
        )
    gen_p = split_patches(gen, cfg.patch_grid)
    gt_p = split_patches(gt, cfg.patch_grid)
    with torch.no_grad():
        ep_gen, ep_gt = gen_p, gt_p
        if cfg.embed_resize is not None:
            size = (cfg.embed_resize, cfg.embed_resize)
            ep_gen = F.interpolate(ep_gen, size=size, mode="bilinear", align_corners=False)
            ep_gt = F.interpolate(ep_gt, size=size, mode="bilinear", align_corners=False)
        z_gen = F.normalize(embed_fn(ep_gen), dim=1)
        z_gt = F.normalize(embed_fn(ep_gt), dim=1)
        weights = cfg.alpha + cfg.beta * (z_gen * z_gt).sum(dim=1)
    per_patch = (gen_p - gt_p).abs().mean(dim=(1, 2, 3))
    return (weights * per_patch).mean()


class GanLosses(NamedTuple):
    g_adv: torch.Tensor
    d_loss: torch.Tensor


def gan_losses(d_real: torch.Tensor, d_fake: torch.Tensor) -> GanLosses:
    """Least-squares GAN objectives over patch score maps.

    d_loss = 0.5*mean((d_real - 1)^2) + 0.5*mean(d_fake^2)
    g_adv  = 0.5*mean((d_fake - 1)^2)

    Both sides carry the 1/2 factor, which pins the documented operating
    points: (d_real=1, d_fake=0) -> d_loss 0; d_fake=1 -> g_adv 0; and
    constant 0.5 scores -> d_loss 0.25, g_adv 0.125.
    """
    d_loss = 0.5 * ((d_real - 1.0) ** 2).mean() + 0.5 * (d_fake**2).mean()
    g_adv = 0.5 * ((d_fake - 1.0) ** 2).mean()
    return GanLosses(g_adv=g_adv, d_loss=d_loss)


def total_generator_loss(
    g_adv: torch.Tensor, l1_term: torch.Tensor, lambda_l1: float = 1.0
) -> torch.Tensor:
    """g_adv + lambda_l1 * l1_term; the adaptive weights already set the L1 scale."""
    if lambda_l1 < 0:
        raise ValueError(f"lambda_l1 must be >= 0, got {lambda_l1}")
    return g_adv + lambda_l1 * l1_term
