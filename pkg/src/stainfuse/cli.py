"""Command-line entry point.

Subcommands: synth-data, train-encoders, train, infer, evaluate, ablate.
Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import yaml

from . import train as trainkit
from .config import ConfigError, TrainConfig, load_config, save_config
from .data import SyntheticStainSpec, generate_synthetic_dataset, load_paired_dataset
from .encoders import load_encoders, pretrain_dual_encoders, save_encoders
from .exceptions import DataError, NumericalError
from .metrics import FixedConvFeatures, evaluate_pairs, format_metric_table, write_report

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="stainfuse", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a deterministic synthetic paired dataset")
    p.add_argument("--spec", help="YAML file of synthetic-spec fields (defaults used if omitted)")
    p.add_argument("--out", required=True, help="output dataset root")
    p.add_argument("--split", default="train")

    p = sub.add_parser("train-encoders", help="contrastively pretrain the dual encoders")
    p.add_argument("--config", help="YAML training config (defaults used if omitted)")
    p.add_argument("--data", required=True, help="paired dataset root")
    p.add_argument("--out", required=True, help="output directory for encoders.pt")
    p.add_argument("--split", default="train")

    p = sub.add_parser("train", help="train the staining GAN with frozen encoders")
    p.add_argument("--config", help="YAML training config (defaults used if omitted)")
    p.add_argument("--data", required=True)
    p.add_argument("--encoders", required=True, help="encoder checkpoint from train-encoders")
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--resume", help="resume from a GAN checkpoint")

    p = sub.add_parser("infer", help="translate a directory of images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input_dir", required=True)
    p.add_argument("--out", dest="output_dir", required=True)

    p = sub.add_parser("evaluate", help="PSNR/SSIM/FID between two image directories")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--report", required=True, help="JSON report path (.txt table written too)")

    p = sub.add_parser("ablate", help="train and score the four standard configurations")
    p.add_argument("--config", help="YAML training config (defaults used if omitted)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--encoders", help="reuse a pretrained encoder checkpoint")
    p.add_argument("--split", default="train")
    return parser


def _load_train_config(path) -> TrainConfig:
    return load_config(path) if path else TrainConfig()


def _cmd_synth_data(args) -> int:
    if args.spec:
        try:
            data = yaml.safe_load(Path(args.spec).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise UsageError(f"cannot read spec file {args.spec}: {exc}")
        spec = SyntheticStainSpec.from_dict(data)
    else:
        spec = SyntheticStainSpec()
    out = generate_synthetic_dataset(spec, args.out, split=args.split)
    print(f"wrote {spec.n_samples} pairs to {out}")
    return EXIT_OK


def _cmd_train_encoders(args) -> int:
    cfg = _load_train_config(args.config)
    dataset = load_paired_dataset(args.data, args.split)
    encoders, history = pretrain_dual_encoders(
        dataset, cfg.encoder, seed=cfg.seed, device=cfg.device
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "encoders.pt"
    save_encoders(ckpt, encoders, cfg.encoder, history)
    save_config(cfg, out / "config_echo.yaml")
    print(f"saved encoder checkpoint to {ckpt} "
          f"(final contrastive loss {history[-1]['info_nce']:.4f})")
    return EXIT_OK


def _cmd_train(args) -> int:
    dataset = load_paired_dataset(args.data, args.split)
    if args.resume:
        trainer = trainkit.GanTrainer.resume(args.resume, dataset, out_dir=args.out)
    else:
        cfg = _load_train_config(args.config)
        encoders, _ = load_encoders(args.encoders, device=cfg.device)
        trainer = trainkit.GanTrainer(cfg, dataset, encoders, args.out)
        save_config(cfg, Path(args.out) / "config_echo.yaml")
    trainer.train()
    final = Path(args.out) / "checkpoint_final.pt"
    trainer.save_checkpoint(final)
    print(f"training finished at epoch {trainer.epoch}; final checkpoint {final}")
    return EXIT_OK


def _cmd_infer(args) -> int:
    written = trainkit.infer(args.ckpt, args.input_dir, args.output_dir)
    print(f"wrote {len(written)} images to {args.output_dir}")
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise DataError(f"directory {d} does not exist")
    from .data import PairedImageFolder

    folder = PairedImageFolder(pred_dir, gt_dir)
    preds, gts = [], []
    for i in range(len(folder)):
        s = folder[i]
        preds.append(s.he)  # first directory = predictions
        gts.append(s.ihc)
    report = evaluate_pairs(preds, gts, folder.keys, FixedConvFeatures())
    write_report(report, args.report)
    print(format_metric_table(
        [{"label": "model", "psnr": report.psnr_mean, "ssim": report.ssim_mean, "fid": report.fid}]
    ))
    print(f"report written to {args.report}")
    return EXIT_OK


def _cmd_ablate(args) -> int:
    cfg = _load_train_config(args.config)
    dataset = load_paired_dataset(args.data, args.split)
    if args.encoders:
        encoders, _ = load_encoders(args.encoders, device=cfg.device)
    else:
        logger.info("no encoder checkpoint given; pretraining encoders first")
        encoders, _ = pretrain_dual_encoders(
            dataset, cfg.encoder, seed=cfg.seed, device=cfg.device
        )
    report = trainkit.run_ablation_suite(cfg, dataset, encoders, args.out)
    print((Path(args.out) / "ablation_report.txt").read_text())
    if report["inversions"]:
        print(f"note: ablated rows beating the full model on PSNR: {report['inversions']}")
    return EXIT_OK


_COMMANDS = {
    "synth-data": _cmd_synth_data,
    "train-encoders": _cmd_train_encoders,
    "train": _cmd_train,
    "infer": _cmd_infer,
    "evaluate": _cmd_evaluate,
    "ablate": _cmd_ablate,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
