"""Command-line entry point.

Subcommands: gen-data, train-teacher, distill, eval, export-graph, ablate.
Each reads an optional config file plus flag overrides; exit code 0 on
success, 2 on usage errors (unknown flags, missing config file), 1 with a
diagnostic on stderr for runtime failures.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import distill, harness, model
from .aoi import downsample_aoi, generate_aoi, one_hot
from .data import downsample_target, read_dataset
from .errors import ConfigError
from .metrics import f1_from_confusion, iou_from_confusion
from .tensorio import read_pgm


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="config file (key = value lines)")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--seed", type=int, help="single seed overriding the config seeds list")
    parser.add_argument("--alpha1", type=float, help="affinity loss weight")
    parser.add_argument("--alpha2", type=float, help="attention loss weight")
    parser.add_argument("--moments", help="comma list of moment orders, subset of 1,2,3")
    parser.add_argument("--no-attention", action="store_true", help="disable the attention loss")
    parser.add_argument("--kd-temp", type=float, help="softmax temperature for the KD baseline")


def _overrides_from_args(args) -> Dict[str, str]:
    overrides: Dict[str, str] = {}
    if args.out is not None:
        overrides["out"] = args.out
    if args.seed is not None:
        overrides["seeds"] = str(args.seed)
    if args.alpha1 is not None:
        overrides["loss.alpha1"] = repr(args.alpha1)
    if args.alpha2 is not None:
        overrides["loss.alpha2"] = repr(args.alpha2)
    if args.moments is not None:
        overrides["loss.moments"] = args.moments
    if args.no_attention:
        overrides["loss.attention"] = "false"
    if args.kd_temp is not None:
        overrides["loss.kd_temperature"] = repr(args.kd_temp)
    return overrides


def _load_config(parser: argparse.ArgumentParser, args) -> harness.ExperimentConfig:
    if args.config is not None and not Path(args.config).exists():
        parser.error(f"config file not found: {args.config}")
    return harness.load_config(args.config, _overrides_from_args(args))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="regiondistill",
        description="Region-affinity distillation experiments on synthetic road scenes",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the train/val/test datasets")
    _add_common(p)

    p = sub.add_parser("train-teacher", help="pretrain the teacher with the seg loss")
    _add_common(p)

    p = sub.add_parser("distill", help="train student variants against the teacher")
    _add_common(p)
    p.add_argument(
        "--variant",
        default=None,
        help=f"single variant to run (default: none+full); one of {', '.join(harness.VARIANTS)}",
    )

    p = sub.add_parser("eval", help="evaluate a checkpoint or a prediction directory")
    _add_common(p)
    p.add_argument("--ckpt", help="network checkpoint to evaluate")
    p.add_argument("--pred", help="directory of pred_%%05d.pgm maps to evaluate")
    p.add_argument("--data", required=True, help="dataset directory")

    p = sub.add_parser("export-graph", help="dump the affinity graph for one sample")
    _add_common(p)
    p.add_argument("--ckpt", required=True, help="network checkpoint")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--sample", type=int, default=0, help="sample index (default 0)")
    p.add_argument("--tap", type=int, default=-1, help="tap index into the network taps")
    p.add_argument("--json-out", help="output JSON path (default: stdout)")

    p = sub.add_parser("ablate", help="run the full variant grid")
    _add_common(p)
    return parser


def _cmd_gen_data(cfg: harness.ExperimentConfig) -> int:
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train, val, test = harness.ensure_datasets(cfg, out_dir)
    print(f"wrote {len(train.samples)}/{len(val.samples)}/{len(test.samples)} "
          f"train/val/test samples under {out_dir / 'data'}")
    return 0


def _cmd_train_teacher(cfg: harness.ExperimentConfig) -> int:
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "losses").mkdir(exist_ok=True)
    train, _, test = harness.ensure_datasets(cfg, out_dir)
    prepared = harness.prepare_samples(train, cfg.aoi_kernel)
    teacher, _ = harness.pretrain_teacher(cfg, prepared, out_dir)
    result = harness.evaluate_network(teacher, test)
    print(f"teacher test mIoU: {result.miou:.4f} (checkpoint: {out_dir / 'teacher.ckpt'})")
    if result.miou < cfg.teacher_miou_floor:
        print(
            f"warning: teacher mIoU below floor {cfg.teacher_miou_floor}",
            file=sys.stderr,
        )
    return 0


def _cmd_distill(cfg: harness.ExperimentConfig, variant: Optional[str]) -> int:
    variants = harness.DEFAULT_VARIANTS if variant is None else (variant,)
    result = harness.run_experiment(cfg, variants)
    print(f"metrics: {result.out_dir / 'metrics.csv'}")
    return 0


def _cmd_ablate(cfg: harness.ExperimentConfig) -> int:
    result = harness.run_experiment(cfg, harness.ABLATION_VARIANTS)
    print(f"metrics: {result.out_dir / 'metrics.csv'} "
          f"({len(result.rows)} rows = {len(harness.ABLATION_VARIANTS)} variants x "
          f"{len(cfg.seeds)} seeds)")
    return 0


def _cmd_eval(cfg: harness.ExperimentConfig, args) -> int:
    if (args.ckpt is None) == (args.pred is None):
        raise ConfigError("eval needs exactly one of --ckpt or --pred")
    dataset = read_dataset(args.data)
    if args.ckpt is not None:
        net = model.load_checkpoint(args.ckpt)
        result = harness.evaluate_network(net, dataset)
        tag = Path(args.ckpt).stem
    else:
        preds, gts = [], []
        pred_dir = Path(args.pred)
        for i, sample in enumerate(dataset.samples):
            path = pred_dir / f"pred_{i:05d}.pgm"
            if not path.exists():
                raise ConfigError(f"missing prediction map {path}")
            preds.append(read_pgm(path).astype(np.int64))
            gts.append(sample.target)
        result = harness.evaluate_predictions(preds, gts, dataset.n)
        tag = pred_dir.name
    row = harness.RunRow(
        variant=f"eval:{tag}",
        seed=0,
        miou=result.miou,
        iou=result.iou,
        f1=result.f1,
        loss_seg=float("nan"),
        loss_m=float("nan"),
        loss_a=float("nan"),
        steps=0,
        wall_ms=0.0,
    )
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    harness.write_metrics_csv([row], dataset.n, out_dir / "eval.csv")
    print(f"mIoU: {result.miou!r} (rows: {out_dir / 'eval.csv'})")
    return 0


def _cmd_export_graph(cfg: harness.ExperimentConfig, args) -> int:
    net = model.load_checkpoint(args.ckpt)
    dataset = read_dataset(args.data)
    if not (0 <= args.sample < len(dataset.samples)):
        raise ConfigError(f"sample index {args.sample} outside dataset of {len(dataset.samples)}")
    sample = dataset.samples[args.sample]
    _, tapped = model.forward(net, sample.image)
    if not tapped:
        raise ConfigError("network has no taps to export a graph from")
    features = tapped[args.tap]
    labels = one_hot(sample.target, dataset.n)
    aoi = generate_aoi(labels, cfg.aoi_kernel)
    aoi = downsample_aoi(aoi, features.shape[0], features.shape[1])
    graph = distill.build_affinity_graph(distill.moment_pool(features, aoi))
    text = distill.export_graph(graph)
    if args.json_out:
        Path(args.json_out).write_text(text)
        print(f"graph written to {args.json_out}")
    else:
        print(text)
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _load_config(parser, args)
        if args.command == "gen-data":
            return _cmd_gen_data(cfg)
        if args.command == "train-teacher":
            return _cmd_train_teacher(cfg)
        if args.command == "distill":
            return _cmd_distill(cfg, args.variant)
        if args.command == "ablate":
            return _cmd_ablate(cfg)
        if args.command == "eval":
            return _cmd_eval(cfg, args)
        if args.command == "export-graph":
            return _cmd_export_graph(cfg, args)
        parser.error(f"unknown command {args.command!r}")
    except Exception as exc:  # runtime failure, not usage
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
