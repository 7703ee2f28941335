"""Two-phase training orchestration, checkpointing, inference, ablation.

Phase one pretrains the dual encoders (see :mod:`stainfuse.encoders`);
phase two trains the GAN with the encoders frozen. The trainer is
deterministic for a fixed seed on one device: batch order and augmentation
draws come from a single checkpointed generator, so resuming from a
checkpoint reproduces straight-through training step for step.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import torch
from torch.nn import functional as F

from .config import TrainConfig
from .data import (
    PairedSample,
    from_gan_range,
    load_image,
    random_crop_pair,
    random_hflip_pair,
    save_image,
    to_gan_range,
)
from .discriminator import PatchDiscriminator
from .encoders import DualEncoders
from .exceptions import DataError, NumericalError
from .generator import StainGenerator
from .losses import adaptive_l1_loss, gan_losses, total_generator_loss
from .metrics import FixedConvFeatures, MetricReport, evaluate_pairs, format_metric_table, psnr

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

ABLATION_ROWS = (
    ("full", "Full model", {}),
    ("no_multiscale", "Without multi-scale extraction", {"use_vmfe": False}),
    ("no_attention", "Without cross-attention fusion", {"use_attention": False}),
    ("no_adaptive_l1", "Without adaptive L1 loss", {"use_adaptive_l1": False}),
)


def encoder_guidance(
    encoders: DualEncoders, he_gan: torch.Tensor, bottleneck_hw: Tuple[int, int]
) -> torch.Tensor:
    """Frozen H&E-encoder feature map, bilinearly resized to bottleneck size."""
    with torch.no_grad():
        feats = encoders.he.features(he_gan)
        return F.interpolate(feats, size=bottleneck_hw, mode="bilinear", align_corners=False)


def _linear_decay(epochs: int):
    # constant for the first half, linear to zero over the second
    start = epochs // 2

    def factor(epoch: int) -> float:
        if epoch < start:
            return 1.0
        return max(0.0, (epochs - epoch) / max(epochs - start, 1))

    return factor


class GanTrainer:
    """Owns all mutable GAN state; encoders stay frozen throughout."""

    def __init__(
        self,
        cfg: TrainConfig,
        dataset: Sequence[PairedSample],
        encoders: DualEncoders,
        out_dir,
    ):
        if len(dataset) == 0:
            raise DataError("training dataset is empty")
        self.cfg = cfg
        self.dataset = dataset
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.device = cfg.device

        torch.manual_seed(cfg.seed)
        self.encoders = encoders.to(self.device).freeze()
        gen_cfg = replace(
            cfg.generator,
            use_vmfe=cfg.ablation.use_vmfe,
            use_attention=cfg.ablation.use_attention,
            encoder_channels=self.encoders.he.feature_channels,
        )
        self.generator = StainGenerator(gen_cfg).to(self.device)
        self.discriminator = PatchDiscriminator(
            in_channels=gen_cfg.input_channels + gen_cfg.output_channels
        ).to(self.device)
        self.opt_g = torch.optim.Adam(
            self.generator.parameters(), lr=cfg.gan.lr, betas=cfg.gan.betas
        )
        self.opt_d = torch.optim.Adam(
            self.discriminator.parameters(), lr=cfg.gan.lr, betas=cfg.gan.betas
        )
        if cfg.gan.lr_linear_decay:
            rule = _linear_decay(cfg.gan.epochs)
            self.sched_g = torch.optim.lr_scheduler.LambdaLR(self.opt_g, rule)
            self.sched_d = torch.optim.lr_scheduler.LambdaLR(self.opt_d, rule)
        else:
            self.sched_g = self.sched_d = None

        self.rng = torch.Generator().manual_seed(cfg.seed + 1)
        self.epoch = 0
        self.global_step = 0
        self.best_psnr = float("-inf")
        self._perm: Optional[List[int]] = None
        self._cursor = 0
        self.history: List[dict] = []
        self._val_indices, self._train_indices = self._split_validation()

    # ------------------------------------------------------------------ data

    def _split_validation(self) -> Tuple[List[int], List[int]]:
        n = len(self.dataset)
        n_val = int(n * self.cfg.gan.val_fraction)
        if n_val == 0:
            return [], list(range(n))
        # deterministic carve-out: every floor(n/n_val)-th sample by position
        stride = max(n // n_val, 1)
        val = list(range(0, n, stride))[:n_val]
        train = [i for i in range(n) if i not in set(val)]
        return val, train

    def _augment(self, sample: PairedSample) -> PairedSample:
        gan_cfg = self.cfg.gan
        if gan_cfg.crop_size is not None and (
            sample.he.shape[-1] != gan_cfg.crop_size or sample.he.shape[-2] != gan_cfg.crop_size
        ):
            sample = random_crop_pair(sample, gan_cfg.crop_size, self.rng)
        if gan_cfg.hflip:
            sample = random_hflip_pair(sample, self.rng)
        return sample

    def _next_batch(self) -> Tuple[torch.Tensor, torch.Tensor, List[str]]:
        if self._perm is None:
            self._perm = torch.randperm(len(self._train_indices), generator=self.rng).tolist()
            self._cursor = 0
        take = self._perm[self._cursor : self._cursor + self.cfg.gan.batch_size]
        self._cursor += len(take)
        samples = [self._augment(self.dataset[self._train_indices[i]]) for i in take]
        he = torch.stack([to_gan_range(s.he) for s in samples]).to(self.device)
        gt = torch.stack([to_gan_range(s.ihc) for s in samples]).to(self.device)
        keys = [s.key for s in samples]
        if self._cursor >= len(self._perm):
            self._perm = None
        return he, gt, keys

    # ----------------------------------------------------------------- steps

    def _guidance(self, he: torch.Tensor) -> Optional[torch.Tensor]:
        if not self.cfg.ablation.use_attention:
            return None
        hw = (he.shape[-2] // 4, he.shape[-1] // 4)
        return encoder_guidance(self.encoders, he, hw)

    def _l1_term(self, fake: torch.Tensor, gt: torch.Tensor) -> Tuple[torch.Tensor, str]:
        if self.cfg.ablation.use_adaptive_l1:
            return adaptive_l1_loss(fake, gt, self.encoders.ihc, self.cfg.adaptive_l1), "adaptive"
        return (fake - gt).abs().mean(), "plain"

    def _train_step(self) -> dict:
        he, gt, keys = self._next_batch()
        fake = self.generator(he, self._guidance(he))

        d_real = self.discriminator(torch.cat([he, gt], dim=1))
        d_fake = self.discriminator(torch.cat([he, fake.detach()], dim=1))
        d_loss = gan_losses(d_real, d_fake).d_loss
        self.opt_d.zero_grad()
        d_loss.backward()
        self.opt_d.step()

        d_fake_for_g = self.discriminator(torch.cat([he, fake], dim=1))
        g_adv = gan_losses(d_real.detach(), d_fake_for_g).g_adv
        l1, l1_kind = self._l1_term(fake, gt)
        g_loss = total_generator_loss(g_adv, l1, self.cfg.gan.lambda_l1)
        self.opt_g.zero_grad()
        g_loss.backward()
        self.opt_g.step()

        record = {
            "step": self.global_step,
            "epoch": self.epoch,
            "d_loss": float(d_loss.detach()),
            "g_adv": float(g_adv.detach()),
            "l1": float(l1.detach()),
            "l1_kind": l1_kind,
            "g_loss": float(g_loss.detach()),
            "keys": keys,
        }
        if not all(
            torch.isfinite(t).all() for t in (d_loss.detach(), g_loss.detach())
        ):
            dump = self.out_dir / "numerical_failure.json"
            dump.write_text(json.dumps(record, indent=2))
            raise NumericalError(
                f"non-finite loss at step {self.global_step} on batch {keys}; "
                f"diagnostics in {dump}"
            )
        self.global_step += 1
        self.history.append(record)
        return record

    def train(self, num_steps: Optional[int] = None) -> List[dict]:
        """Run until the configured epochs or an explicit step budget."""
        limit = num_steps if num_steps is not None else self.cfg.gan.max_steps
        gan_cfg = self.cfg.gan
        log_path = self.out_dir / "train_log.jsonl"
        with open(log_path, "a") as log_file:
            while self.epoch < gan_cfg.epochs:
                record = self._train_step()
                log_file.write(json.dumps(record) + "\n")
                # epoch bookkeeping must land before a step-budget break so a
                # checkpoint taken at the boundary resumes identically
                if self._perm is None:
                    self._finish_epoch()
                if limit is not None and self.global_step >= limit:
                    break
        return self.history

    def _finish_epoch(self) -> None:
        self.epoch += 1
        if self.sched_g is not None:
            self.sched_g.step()
            self.sched_d.step()
        gan_cfg = self.cfg.gan
        last = self.history[-1] if self.history else {}
        logger.info(
            "epoch %d/%d: d=%.4f g_adv=%.4f l1=%.4f",
            self.epoch, gan_cfg.epochs,
            last.get("d_loss", float("nan")),
            last.get("g_adv", float("nan")),
            last.get("l1", float("nan")),
        )
        if gan_cfg.sample_every and self.epoch % gan_cfg.sample_every == 0:
            self._write_sample_grid()
        if gan_cfg.checkpoint_every and self.epoch % gan_cfg.checkpoint_every == 0:
            self.save_checkpoint(self.out_dir / f"checkpoint_epoch{self.epoch:04d}.pt")
            self._track_best()

    # ------------------------------------------------------------ evaluation

    @torch.no_grad()
    def generate(self, samples: Sequence[PairedSample]) -> List[torch.Tensor]:
        """Deterministic eval-mode translation of the given pairs' sources."""
        self.generator.eval()
        outs = []
        for s in samples:
            he = to_gan_range(s.he)[None].to(self.device)
            fake = self.generator(he, self._guidance(he))
            outs.append(from_gan_range(fake[0]).cpu())
        self.generator.train()
        return outs

    def _validation_psnr(self) -> float:
        indices = self._val_indices or self._train_indices
        samples = [self.dataset[i] for i in indices]
        fakes = self.generate(samples)
        return sum(psnr(f, s.ihc) for f, s in zip(fakes, samples)) / len(samples)

    def _track_best(self) -> None:
        value = self._validation_psnr()
        if value > self.best_psnr:
            self.best_psnr = value
            self.save_checkpoint(self.out_dir / "checkpoint_best.pt")

    def _write_sample_grid(self) -> None:
        grid_dir = self.out_dir / "samples"
        grid_dir.mkdir(exist_ok=True)
        samples = [self.dataset[i] for i in self._train_indices[:4]]
        fakes = self.generate(samples)
        rows = [torch.cat([s.he, f, s.ihc], dim=-1) for s, f in zip(samples, fakes)]
        save_image(torch.cat(rows, dim=-2), grid_dir / f"epoch_{self.epoch:04d}.png")

    # ---------------------------------------------------------- persistence

    def save_checkpoint(self, path) -> None:
        state = {
            "format_version": CHECKPOINT_VERSION,
            "config": self.cfg.to_dict(),
            "epoch": self.epoch,
            "global_step": self.global_step,
            "best_psnr": self.best_psnr,
            "perm": self._perm,
            "cursor": self._cursor,
            "generator_state": self.generator.state_dict(),
            "discriminator_state": self.discriminator.state_dict(),
            "he_encoder_state": self.encoders.he.state_dict(),
            "ihc_encoder_state": self.encoders.ihc.state_dict(),
            "encoder_arch": {
                "widths": list(self.encoders.he.widths),
                "embed_dim": self.encoders.he.embed_dim,
            },
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "sched_g": self.sched_g.state_dict() if self.sched_g else None,
            "sched_d": self.sched_d.state_dict() if self.sched_d else None,
            "shuffle_rng": self.rng.get_state(),
            "torch_rng": torch.get_rng_state(),
        }
        torch.save(state, path)

    @classmethod
    def resume(cls, path, dataset: Sequence[PairedSample], out_dir=None) -> "GanTrainer":
        blob = torch.load(path, map_location="cpu", weights_only=False)
        if blob.get("format_version") != CHECKPOINT_VERSION:
            raise DataError(f"unsupported checkpoint version {blob.get('format_version')!r}")
        cfg = TrainConfig.from_dict(blob["config"])
        encoders = _encoders_from_blob(blob)
        trainer = cls(cfg, dataset, encoders, out_dir or Path(path).parent)
        trainer.generator.load_state_dict(blob["generator_state"])
        trainer.discriminator.load_state_dict(blob["discriminator_state"])
        trainer.opt_g.load_state_dict(blob["opt_g"])
        trainer.opt_d.load_state_dict(blob["opt_d"])
        if trainer.sched_g is not None and blob["sched_g"] is not None:
            trainer.sched_g.load_state_dict(blob["sched_g"])
            trainer.sched_d.load_state_dict(blob["sched_d"])
        trainer.epoch = blob["epoch"]
        trainer.global_step = blob["global_step"]
        trainer.best_psnr = blob["best_psnr"]
        trainer._perm = blob["perm"]
        trainer._cursor = blob["cursor"]
        trainer.rng.set_state(blob["shuffle_rng"])
        torch.set_rng_state(blob["torch_rng"])
        return trainer


def _encoders_from_blob(blob: dict) -> DualEncoders:
    arch = blob["encoder_arch"]
    encoders = DualEncoders(widths=tuple(arch["widths"]), embed_dim=arch["embed_dim"])
    encoders.he.load_state_dict(blob["he_encoder_state"])
    encoders.ihc.load_state_dict(blob["ihc_encoder_state"])
    return encoders.freeze()


def load_generator_for_inference(path, device: str = "cpu"):
    """(generator, encoders, config) from a training checkpoint, eval mode."""
    blob = torch.load(path, map_location=device, weights_only=False)
    if blob.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {blob.get('format_version')!r}")
    cfg = TrainConfig.from_dict(blob["config"])
    encoders = _encoders_from_blob(blob).to(device)
    gen_cfg = replace(
        cfg.generator,
        use_vmfe=cfg.ablation.use_vmfe,
        use_attention=cfg.ablation.use_attention,
        encoder_channels=encoders.he.feature_channels,
    )
    generator = StainGenerator(gen_cfg).to(device)
    generator.load_state_dict(blob["generator_state"])
    generator.eval()
    return generator, encoders, cfg


@torch.no_grad()
def infer(checkpoint_path, input_dir, output_dir, device: str = "cpu") -> List[Path]:
    """Translate every decodable image in ``input_dir``; same filenames out."""
    generator, encoders, cfg = load_generator_for_inference(checkpoint_path, device)
    input_dir, output_dir = Path(input_dir), Path(output_dir)
    if not input_dir.is_dir():
        raise DataError(f"input directory {input_dir} does not exist")
    output_dir.mkdir(parents=True, exist_ok=True)
    paths = sorted(
        p for p in input_dir.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp")
    )
    if not paths:
        raise DataError(f"no images found in {input_dir}")
    written: List[Path] = []
    for p in paths:
        try:
            img = load_image(p)
        except DataError as exc:
            logger.warning("skipping %s: %s", p, exc)
            continue
        he = to_gan_range(img)[None].to(device)
        guidance = None
        if cfg.ablation.use_attention:
            guidance = encoder_guidance(encoders, he, (he.shape[-2] // 4, he.shape[-1] // 4))
        fake = generator(he, guidance)
        out_path = output_dir / p.name
        save_image(from_gan_range(fake[0]).cpu(), out_path)
        written.append(out_path)
    if not written:
        raise DataError(f"all {len(paths)} inputs in {input_dir} failed to decode")
    return written


def evaluate_model(
    trainer: GanTrainer, samples: Sequence[PairedSample], feature_fn=None
) -> MetricReport:
    fakes = trainer.generate(samples)
    return evaluate_pairs(
        fakes, [s.ihc for s in samples], [s.key for s in samples], feature_fn
    )


def run_ablation_suite(
    cfg: TrainConfig,
    dataset: Sequence[PairedSample],
    encoders: DualEncoders,
    out_dir,
    feature_fn=None,
) -> dict:
    """Train and score the four standard configurations under one seed.

    Emits ``ablation_report.json`` and an aligned ``ablation_report.txt``;
    a full-model PSNR below any ablated row is flagged in the report's
    ``inversions`` list rather than raised.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    feature_fn = feature_fn if feature_fn is not None else FixedConvFeatures()
    eval_samples = [dataset[i] for i in range(len(dataset))]
    rows = []
    for name, label, overrides in ABLATION_ROWS:
        run_cfg = copy.deepcopy(cfg)
        run_cfg.ablation = replace(run_cfg.ablation, **overrides)
        trainer = GanTrainer(run_cfg, dataset, copy.deepcopy(encoders), out_dir / name)
        trainer.train()
        report = evaluate_model(trainer, eval_samples, feature_fn)
        rows.append(
            {
                "name": name,
                "label": label,
                "psnr": report.psnr_mean,
                "ssim": report.ssim_mean,
                "fid": report.fid,
                "generator_parameters": sum(p.numel() for p in trainer.generator.parameters()),
                "l1_kind": trainer.history[-1]["l1_kind"] if trainer.history else None,
                "flags": {
                    "use_vmfe": run_cfg.ablation.use_vmfe,
                    "use_attention": run_cfg.ablation.use_attention,
                    "use_adaptive_l1": run_cfg.ablation.use_adaptive_l1,
                },
            }
        )
    full_psnr = rows[0]["psnr"]
    inversions = [r["name"] for r in rows[1:] if r["psnr"] > full_psnr]
    report = {
        "rows": rows,
        "inversions": inversions,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
    }
    with open(out_dir / "ablation_report.json", "w") as f:
        json.dump(report, f, indent=2)
    table = format_metric_table(rows)
    (out_dir / "ablation_report.txt").write_text(table + "\n")
    logger.info("ablation table:\n%s", table)
    return report
