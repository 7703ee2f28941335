"""Image fidelity metrics and evaluation reports.

Conventions are pinned so numbers reproduce run-to-run:
  - PSNR: 10*log10(max_val^2 / MSE), capped at 100 dB for identical images.
  - SSIM: single-scale, 11x11 Gaussian window sigma=1.5, K1=0.01, K2=0.03,
    valid-window averaging (5-pixel border cropped), color reduced to
    BT.601 luma.
  - FID: Frechet distance between Gaussian fits of feature sets, symmetric
    matrix square root with eigenvalues below 1e-10 clamped to zero. The
    feature extractor is injected; a small fixed random-weight convnet is
    shipped so evaluation never needs downloaded weights.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .exceptions import ShapeError

PSNR_CAP_DB = 100.0
_EIG_CLAMP = 1e-10

_LUMA = (0.299, 0.587, 0.114)


def _as_tensor(x) -> torch.Tensor:
    t = torch.as_tensor(x, dtype=torch.float64)
    return t


def psnr(a, b, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs return the 100 dB cap."""
    ta, tb = _as_tensor(a), _as_tensor(b)
    if ta.shape != tb.shape:
        raise ShapeError(f"shape mismatch: {tuple(ta.shape)} vs {tuple(tb.shape)}")
    mse = float(((ta - tb) ** 2).mean())
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(max_val**2 / mse), PSNR_CAP_DB)


def _to_gray(t: torch.Tensor) -> torch.Tensor:
    """Reduce (..., C, H, W) or (H, W) input to a (N, 1, H, W) luma image."""
    if t.dim() == 2:
        t = t[None, None]
    elif t.dim() == 3:
        t = t[None]
    if t.dim() != 4:
        raise ShapeError(f"expected 2-4 dims, got shape {tuple(t.shape)}")
    c = t.shape[1]
    if c == 1:
        return t
    if c == 3:
        w = torch.tensor(_LUMA, dtype=t.dtype, device=t.device).view(1, 3, 1, 1)
        return (t * w).sum(dim=1, keepdim=True)
    raise ShapeError(f"grayscale conversion defined for 1 or 3 channels, got {c}")


def _gaussian_window(size: int, sigma: float, dtype) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)[None, None]


def ssim(
    a,
    b,
    data_range: float = 1.0,
    window_size: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
) -> float:
    """Mean structural similarity over the valid (uncropped-window) region."""
    ta, tb = _as_tensor(a), _as_tensor(b)
    if ta.shape != tb.shape:
        raise ShapeError(f"shape mismatch: {tuple(ta.shape)} vs {tuple(tb.shape)}")
    ga, gb = _to_gray(ta), _to_gray(tb)
    if ga.shape[-1] < window_size or ga.shape[-2] < window_size:
        raise ShapeError(
            f"images of size {tuple(ga.shape[-2:])} are smaller than the "
            f"{window_size}x{window_size} window"
        )
    win = _gaussian_window(window_size, sigma, ga.dtype)
    conv = lambda t: torch.nn.functional.conv2d(t, win)
    mu_a, mu_b = conv(ga), conv(gb)
    var_a = conv(ga * ga) - mu_a**2
    var_b = conv(gb * gb) - mu_b**2
    cov = conv(ga * gb) - mu_a * mu_b
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    ssim_map = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    )
    return float(ssim_map.mean())


class FixedConvFeatures:
    """Deterministic random-weight conv feature extractor for offline FID.

    Weights are drawn once from a seeded generator at construction, so the
    same (seed, dim) always yields the same features. Accepts any spatial
    size >= 8 via adaptive pooling.
    """

    def __init__(self, dim: int = 64, seed: int = 0):
        g = torch.Generator().manual_seed(seed)
        self.dim = dim
        layers = []
        prev = 3
        for w in (16, 32, dim):
            conv = nn.Conv2d(prev, w, kernel_size=3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(
                    torch.randn(conv.weight.shape, generator=g) / math.sqrt(prev * 9)
                )
                conv.bias.zero_()
            layers += [conv, nn.LeakyReLU(0.2)]
            prev = w
        self.net = nn.Sequential(*layers, nn.AdaptiveAvgPool2d(1)).eval()
        for p in self.net.parameters():
            p.requires_grad_(False)

    @torch.no_grad()
    def __call__(self, images: torch.Tensor) -> np.ndarray:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ShapeError(f"expected (N, 3, H, W) images, got {tuple(images.shape)}")
        out = self.net(images.to(torch.float32) * 2.0 - 1.0)
        return out.flatten(1).cpu().numpy().astype(np.float64)


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    """Square root of a symmetric PSD matrix; eigenvalues < 1e-10 clamp to 0."""
    sym = (m + m.T) / 2.0
    vals, vecs = np.linalg.eigh(sym)
    vals = np.where(vals < _EIG_CLAMP, 0.0, vals)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid_from_stats(
    mu1: np.ndarray, sigma1: np.ndarray, mu2: np.ndarray, sigma2: np.ndarray
) -> float:
    """||mu1-mu2||^2 + tr(S1 + S2 - 2*(S1^1/2 S2 S1^1/2)^1/2)."""
    diff = np.asarray(mu1, dtype=np.float64) - np.asarray(mu2, dtype=np.float64)
    s1 = np.asarray(sigma1, dtype=np.float64)
    s2 = np.asarray(sigma2, dtype=np.float64)
    root1 = _sqrtm_psd(s1)
    inner = _sqrtm_psd(root1 @ s2 @ root1)
    return float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * np.trace(inner))


def fid_from_features(real_feats: np.ndarray, fake_feats: np.ndarray) -> float:
    """Gaussian-fit Frechet distance between two feature sets (rows = samples)."""
    fr = np.asarray(real_feats, dtype=np.float64)
    ff = np.asarray(fake_feats, dtype=np.float64)
    for name, f in (("real", fr), ("fake", ff)):
        if f.ndim != 2 or f.shape[0] < 2:
            raise ValueError(f"{name} feature set needs >= 2 samples, got shape {f.shape}")
        if not np.isfinite(f).all():
            raise ValueError(f"{name} feature set contains non-finite values")
    return fid_from_stats(
        fr.mean(axis=0), np.cov(fr, rowvar=False), ff.mean(axis=0), np.cov(ff, rowvar=False)
    )


def fid(
    real_images: torch.Tensor,
    fake_images: torch.Tensor,
    feature_fn: Callable[[torch.Tensor], np.ndarray],
) -> float:
    """FID between two image sets under an injected feature extractor."""
    for name, t in (("real", real_images), ("fake", fake_images)):
        if t.dim() != 4 or t.shape[0] < 2:
            raise ValueError(f"{name} image set needs >= 2 images, got shape {tuple(t.shape)}")
    return fid_from_features(feature_fn(real_images), feature_fn(fake_images))


@dataclass
class MetricReport:
    psnr_mean: float
    ssim_mean: float
    fid: float
    n_images: int
    per_image: List[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "psnr_mean": self.psnr_mean,
            "ssim_mean": self.ssim_mean,
            "fid": self.fid,
            "n_images": self.n_images,
            "per_image": self.per_image,
            "config": self.config,
        }


def evaluate_pairs(
    pred_images: Sequence[torch.Tensor],
    gt_images: Sequence[torch.Tensor],
    keys: Sequence[str],
    feature_fn: Optional[Callable] = None,
    max_val: float = 1.0,
) -> MetricReport:
    """Per-image PSNR/SSIM plus FID over the two sets; images in [0, 1]."""
    if len(pred_images) != len(gt_images) or len(pred_images) == 0:
        raise ValueError("prediction and ground-truth sets must be equal-length and non-empty")
    feature_fn = feature_fn if feature_fn is not None else FixedConvFeatures()
    per_image = []
    for key, p, g in zip(keys, pred_images, gt_images):
        per_image.append({"key": key, "psnr": psnr(p, g, max_val), "ssim": ssim(p, g, max_val)})
    if len(pred_images) >= 2:
        fid_value = fid(torch.stack(list(gt_images)), torch.stack(list(pred_images)), feature_fn)
    else:
        fid_value = float("nan")
    return MetricReport(
        psnr_mean=float(np.mean([r["psnr"] for r in per_image])),
        ssim_mean=float(np.mean([r["ssim"] for r in per_image])),
        fid=fid_value,
        n_images=len(per_image),
        per_image=per_image,
    )


def format_metric_table(rows: Sequence[dict], label_header: str = "Configuration") -> str:
    """Aligned plain-text table with PSNR / SSIM / FID columns."""
    headers = [label_header, "PSNR", "SSIM", "FID"]
    body = [
        [
            str(r["label"]),
            f"{r['psnr']:.3f}",
            f"{r['ssim']:.3f}",
            f"{r['fid']:.2f}" if math.isfinite(r["fid"]) else "n/a",
        ]
        for r in rows
    ]
    widths = [max(len(h), *(len(row[i]) for row in body)) for i, h in enumerate(headers)]
    def fmt(cells):
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    lines = [fmt(headers), fmt(["-" * w for w in widths])]
    lines += [fmt(row) for row in body]
    return "\n".join(lines)


def write_report(report: MetricReport, path, label: str = "model") -> None:
    """Write the JSON report plus an aligned .txt table next to it."""
    path = str(path)
    with open(path, "w") as f:
        json.dump(report.to_dict(), f, indent=2)
    table = format_metric_table(
        [{"label": label, "psnr": report.psnr_mean, "ssim": report.ssim_mean, "fid": report.fid}]
    )
    txt_path = path[: path.rfind(".")] + ".txt" if "." in path else path + ".txt"
    with open(txt_path, "w") as f:
        f.write(table + "\n")
