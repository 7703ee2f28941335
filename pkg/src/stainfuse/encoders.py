"""Dual image encoders trained contrastively on paired source/target slides.

Each encoder maps an image batch to unit-norm embedding vectors; a frozen
copy later provides (a) the guidance feature map the generator attends to
and (b) patch embeddings for the similarity-weighted L1 loss. Pretraining
pulls paired embeddings together with a temperature-scaled softmax
cross-entropy over in-batch candidates plus an L2 weight penalty.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .exceptions import DataError, ShapeError

logger = logging.getLogger(__name__)

ENCODER_CHECKPOINT_VERSION = 1


@dataclass
class EncoderTrainConfig:
    """Contrastive pretraining hyperparameters.

    Defaults follow the full-scale recipe (300 epochs, batch 64); desk runs
    override epochs/batch/widths.
    """

    epochs: int = 300
    batch_size: int = 64
    lr: float = 1e-3
    betas: Tuple[float, float] = (0.9, 0.999)
    temperature: float = 0.07
    weight_reg: float = 1e-4
    embed_dim: int = 256
    widths: Tuple[int, ...] = (32, 64, 128, 256)

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.weight_reg < 0:
            raise ValueError("weight_reg must be >= 0")
        if self.batch_size < 2:
            raise ValueError("contrastive training needs batch_size >= 2")


class ImageEncoder(nn.Module):
    """Small convolutional encoder: stride-2 stages, GAP, projection head.

    ``forward`` returns unit-norm embeddings; ``features`` exposes the last
    convolutional stage for attention guidance.
    """

    def __init__(
        self,
        in_channels: int = 3,
        widths: Sequence[int] = (32, 64, 128, 256),
        embed_dim: int = 256,
    ):
        super().__init__()
        stages = []
        prev = in_channels
        for w in widths:
            stages += [
                nn.Conv2d(prev, w, kernel_size=4, stride=2, padding=1),
                nn.BatchNorm2d(w),
                nn.LeakyReLU(0.2, inplace=True),
            ]
            prev = w
        self.in_channels = in_channels
        self.widths = tuple(widths)
        self.feature_channels = prev
        self.embed_dim = embed_dim
        self.stages = nn.Sequential(*stages)
        self.head = nn.Sequential(
            nn.Linear(prev, prev),
            nn.ReLU(inplace=True),
            nn.Linear(prev, embed_dim),
        )

    def features(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(
                f"expected (B, {self.in_channels}, H, W) input, got {tuple(x.shape)}"
            )
        return self.stages(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        f = self.features(x)
        pooled = f.mean(dim=(2, 3))
        return F.normalize(self.head(pooled), dim=1)


class DualEncoders(nn.Module):
    """Independent source-domain and target-domain encoders."""

    def __init__(
        self,
        in_channels: int = 3,
        widths: Sequence[int] = (32, 64, 128, 256),
        embed_dim: int = 256,
    ):
        super().__init__()
        self.he = ImageEncoder(in_channels, widths, embed_dim)
        self.ihc = ImageEncoder(in_channels, widths, embed_dim)

    def encode(self, domain: str, x: torch.Tensor) -> torch.Tensor:
        if domain not in ("he", "ihc"):
            raise ValueError(f"domain must be 'he' or 'ihc', got {domain!r}")
        return getattr(self, domain)(x)

    def freeze(self) -> "DualEncoders":
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self


def info_nce_loss(
    he_embeddings: torch.Tensor, ihc_embeddings: torch.Tensor, temperature: float
) -> torch.Tensor:
    """Symmetric temperature-scaled contrastive loss over in-batch candidates.

    Row i of each matrix is the embedding of the i-th pair; for every anchor
    the positive is its counterpart and the remaining N-1 in-batch
    counterparts are negatives. The denominator runs over all N candidates,
    so identical similarities everywhere give exactly ln(N). Both directions
    (source->target and target->source) are averaged.
    """
    if he_embeddings.shape != ihc_embeddings.shape:
        raise ShapeError(
            f"embedding matrices must match, got {tuple(he_embeddings.shape)} "
            f"vs {tuple(ihc_embeddings.shape)}"
        )
    n = he_embeddings.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 pairs for in-batch negatives, got {n}")
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    he_n = F.normalize(he_embeddings, dim=1)
    ihc_n = F.normalize(ihc_embeddings, dim=1)
    logits = he_n @ ihc_n.t() / temperature
    labels = torch.arange(n, device=logits.device)
    return 0.5 * (F.cross_entropy(logits, labels) + F.cross_entropy(logits.t(), labels))


def l2_penalty(module: nn.Module, strength: float) -> torch.Tensor:
    """strength * sum of squared weight entries; biases and norm params excluded.

    Weights are identified as parameters with >= 2 dimensions, the usual
    weight-decay filter.
    """
    if strength < 0:
        raise ValueError(f"strength must be >= 0, got {strength}")
    total = None
    for p in module.parameters():
        if p.dim() < 2:
            continue
        term = (p**2).sum()
        total = term if total is None else total + term
    if total is None:
        return torch.zeros(())
    return strength * total


def _stack_pairs(dataset, indices) -> Tuple[torch.Tensor, torch.Tensor]:
    he = torch.stack([dataset[i].he for i in indices])
    ihc = torch.stack([dataset[i].ihc for i in indices])
    # datasets carry [0, 1] images; the encoders consume [-1, 1]
    return he * 2.0 - 1.0, ihc * 2.0 - 1.0


def pretrain_dual_encoders(
    dataset,
    cfg: EncoderTrainConfig,
    seed: int = 0,
    device: str = "cpu",
    log_every: int = 10,
) -> Tuple[DualEncoders, List[dict]]:
    """Jointly train both encoders; returns them frozen plus a per-epoch log.

    ``dataset`` is a sequence of paired samples with ``.he``/``.ihc`` image
    tensors in [0, 1]. The loss is the contrastive term plus the L2 weight
    penalty over both encoders.
    """
    if len(dataset) < cfg.batch_size:
        raise DataError(
            f"dataset has {len(dataset)} pairs, smaller than one batch ({cfg.batch_size})"
        )
    torch.manual_seed(seed)
    encoders = DualEncoders(widths=cfg.widths, embed_dim=cfg.embed_dim).to(device)
    opt = torch.optim.Adam(encoders.parameters(), lr=cfg.lr, betas=cfg.betas)
    shuffle = torch.Generator().manual_seed(seed)

    history: List[dict] = []
    encoders.train()
    for epoch in range(cfg.epochs):
        perm = torch.randperm(len(dataset), generator=shuffle).tolist()
        nce_sum = reg_sum = 0.0
        n_batches = 0
        for start in range(0, len(perm) - cfg.batch_size + 1, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            he, ihc = _stack_pairs(dataset, idx)
            he, ihc = he.to(device), ihc.to(device)
            nce = info_nce_loss(encoders.he(he), encoders.ihc(ihc), cfg.temperature)
            reg = l2_penalty(encoders, cfg.weight_reg)
            loss = nce + reg
            opt.zero_grad()
            loss.backward()
            opt.step()
            nce_sum += float(nce.detach())
            reg_sum += float(reg.detach())
            n_batches += 1
        entry = {
            "epoch": epoch,
            "info_nce": nce_sum / max(n_batches, 1),
            "l2_penalty": reg_sum / max(n_batches, 1),
        }
        history.append(entry)
        if log_every and epoch % log_every == 0:
            logger.info(
                "encoder epoch %d: info_nce=%.4f l2=%.6f",
                epoch,
                entry["info_nce"],
                entry["l2_penalty"],
            )
    encoders.freeze()
    return encoders, history


def save_encoders(
    path, encoders: DualEncoders, cfg: EncoderTrainConfig, history: Sequence[dict]
) -> None:
    """Write a standalone encoder checkpoint (weights, config echo, log summary)."""
    summary = {
        "epochs_trained": len(history),
        "final_info_nce": history[-1]["info_nce"] if history else None,
        "initial_info_nce": history[0]["info_nce"] if history else None,
    }
    torch.save(
        {
            "format_version": ENCODER_CHECKPOINT_VERSION,
            "config": {
                "epochs": cfg.epochs,
                "batch_size": cfg.batch_size,
                "lr": cfg.lr,
                "betas": list(cfg.betas),
                "temperature": cfg.temperature,
                "weight_reg": cfg.weight_reg,
                "embed_dim": cfg.embed_dim,
                "widths": list(cfg.widths),
            },
            "he_state": encoders.he.state_dict(),
            "ihc_state": encoders.ihc.state_dict(),
            "train_log_summary": summary,
            "history": list(history),
        },
        path,
    )


def load_encoders(path, device: str = "cpu") -> Tuple[DualEncoders, dict]:
    """Load a frozen encoder pair and the checkpoint metadata."""
    blob = torch.load(path, map_location=device, weights_only=False)
    if blob.get("format_version") != ENCODER_CHECKPOINT_VERSION:
        raise DataError(
            f"unsupported encoder checkpoint version {blob.get('format_version')!r}"
        )
    cfg = blob["config"]
    encoders = DualEncoders(widths=tuple(cfg["widths"]), embed_dim=cfg["embed_dim"]).to(device)
    encoders.he.load_state_dict(blob["he_state"])
    encoders.ihc.load_state_dict(blob["ihc_state"])
    encoders.freeze()
    return encoders, blob


@torch.no_grad()
def pair_similarities(
    encoders: DualEncoders, pairs: Iterable, device: str = "cpu", batch_size: int = 64
) -> np.ndarray:
    """Cosine similarity of (he, ihc) embeddings for each given pair."""
    encoders.eval()
    pairs = list(pairs)
    sims: List[float] = []
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start : start + batch_size]
        he = torch.stack([p.he for p in chunk]).to(device) * 2.0 - 1.0
        ihc = torch.stack([p.ihc for p in chunk]).to(device) * 2.0 - 1.0
        zh = encoders.he(he)
        zi = encoders.ihc(ihc)
        sims.extend((zh * zi).sum(dim=1).cpu().tolist())
    return np.asarray(sims)


def threshold_sweep(
    paired_sims: np.ndarray,
    unpaired_sims: np.ndarray,
    n_thresholds: int = 801,
    n_bins: int = 50,
) -> dict:
    """Sweep decision thresholds over [-1, 1] for pair/no-pair classification.

    A pair is called "matched" when its similarity exceeds the threshold;
    accuracy is (true positives + true negatives) / total. Returns the
    accuracy-maximizing threshold plus binned histograms for plotting.
    """
    paired_sims = np.asarray(paired_sims, dtype=np.float64)
    unpaired_sims = np.asarray(unpaired_sims, dtype=np.float64)
    if paired_sims.size == 0 or unpaired_sims.size == 0:
        raise ValueError("both similarity sets must be non-empty")
    thresholds = np.linspace(-1.0, 1.0, n_thresholds)
    total = paired_sims.size + unpaired_sims.size
    # vectorized sweep: counts of sims above each threshold
    tp = (paired_sims[None, :] > thresholds[:, None]).sum(axis=1)
    tn = (unpaired_sims[None, :] <= thresholds[:, None]).sum(axis=1)
    accuracy = (tp + tn) / total
    best = int(np.argmax(accuracy))
    edges = np.linspace(-1.0, 1.0, n_bins + 1)
    return {
        "best_threshold": float(thresholds[best]),
        "accuracy": float(accuracy[best]),
        "histogram": {
            "bin_edges": edges.tolist(),
            "paired_counts": np.histogram(paired_sims, bins=edges)[0].tolist(),
            "unpaired_counts": np.histogram(unpaired_sims, bins=edges)[0].tolist(),
        },
        "paired_mean": float(paired_sims.mean()),
        "unpaired_mean": float(unpaired_sims.mean()),
    }


def similarity_threshold_analysis(
    encoders: DualEncoders,
    paired_set: Sequence,
    unpaired_set: Sequence,
    device: str = "cpu",
) -> dict:
    """Embed both sets and report the best matched/unmatched decision threshold."""
    if len(paired_set) == 0 or len(unpaired_set) == 0:
        raise ValueError("paired_set and unpaired_set must both be non-empty")
    pos = pair_similarities(encoders, paired_set, device=device)
    neg = pair_similarities(encoders, unpaired_set, device=device)
    return threshold_sweep(pos, neg)


def make_unpaired_set(dataset, shift: int = 1) -> List:
    """Mismatched (he_i, ihc_{i+shift}) pairs for negative-set evaluation."""
    n = len(dataset)
    if n < 2:
        raise ValueError("need at least 2 pairs to build a mismatched set")
    shift = shift % n or 1
    out = []
    for i in range(n):
        a, b = dataset[i], dataset[(i + shift) % n]
        out.append(type(a)(he=a.he, ihc=b.ihc, key=f"{a.key}|{b.key}"))
    return out
