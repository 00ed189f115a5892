"""Command-line entry points.

Exit codes: 0 success, 1 usage error, 2 runtime failure. The default
output directory can be set via the PAIRMASK_OUT environment variable.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import losses_check
from .benchmark import VARIANTS, run_benchmark
from .config import ConfigError, apply_overrides, default_toy_configs, load_config
from .data import (
    load_hr_pairs,
    make_synthetic_dataset,
    read_manifest,
    write_synthetic_dataset,
)
from .evaluation import extract_features, finetune_small, linear_probe, write_results_csv
from .masking import (
    assign_mask_probabilities,
    fuse_info_scores,
    patch_info_score,
    sample_masks,
    substituted_positions,
    substitution_probability,
    write_mask_png,
)
from .model import ModelConfig
from .pipeline import TrainConfig, run_pretraining


def _out_dir(args) -> Path:
    out = args.out or os.environ.get("PAIRMASK_OUT", ".")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _configs(args):
    if args.config:
        model_cfg, train_cfg = load_config(args.config)
    else:
        model_cfg, train_cfg = default_toy_configs()
    return apply_overrides(model_cfg, train_cfg, args.set or [])


def _load_labeled_dataset(manifest_path, patch_size: int):
    manifest = read_manifest(manifest_path)
    labels_path = Path(manifest_path).parent / "labels.tsv"
    labels = {}
    if labels_path.exists():
        with open(labels_path) as f:
            for line in f:
                pair_id, _, label = line.strip().partition("\t")
                labels[pair_id] = int(label)
    pairs = []
    for pair in load_hr_pairs(manifest, patch_size):
        pair.label = labels.get(pair.pair_id)
        pairs.append(pair)
    return pairs


def cmd_gen_synth(args) -> int:
    out = _out_dir(args)
    manifest = write_synthetic_dataset(out, args.count, args.seed, args.size, args.classes)
    print(f"wrote {args.count} pairs, manifest {manifest}")
    return 0


def cmd_pretrain(args) -> int:
    model_cfg, train_cfg = _configs(args)
    out = _out_dir(args)
    if args.manifest:
        dataset = _load_labeled_dataset(args.manifest, model_cfg.patch_size)
    else:
        dataset = make_synthetic_dataset(
            args.count, train_cfg.seed, model_cfg.image_size, patch_size=model_cfg.patch_size
        )
    record = run_pretraining(
        train_cfg, dataset, out, model_cfg, resume_from=args.resume_from
    )
    print(f"finished at step {record.step}; checkpoints and metrics in {out}")
    return 0


def cmd_probe(args) -> int:
    out = _out_dir(args)
    results = []
    for seed in args.seeds:
        res = run_benchmark(args.variant, seed, total_epochs=args.epochs)
        results.append(res)
        print(
            f"seed {seed}: pretrained {res.pretrained_accuracy:.3f} "
            f"vs random-init {res.random_init_accuracy:.3f}"
        )
    write_results_csv(
        out / "probe_results.csv",
        [(f"{args.variant}-pretrained", "linear_probe", r.pretrained_accuracy, r.seed)
         for r in results]
        + [("random-init", "linear_probe", r.random_init_accuracy, r.seed)
           for r in results],
    )
    return 0


def cmd_finetune(args) -> int:
    model_cfg, train_cfg = _configs(args)
    from .benchmark import benchmark_datasets, pretrain_variant

    train, test = benchmark_datasets(train_cfg.seed, size=model_cfg.image_size)
    model = pretrain_variant(
        "full", train_cfg.seed, train, model_cfg, total_epochs=args.epochs
    )
    acc = finetune_small(
        model.student, train + test, args.ft_epochs, train_cfg, train_cfg.seed
    )
    print(f"fine-tune top-1 accuracy: {acc:.3f}")
    write_results_csv(
        _out_dir(args) / "finetune_results.csv",
        [("full-pretrained", "finetune", acc, train_cfg.seed)],
    )
    return 0


def cmd_mask_viz(args) -> int:
    model_cfg, train_cfg = _configs(args)
    out = _out_dir(args)
    pairs = make_synthetic_dataset(
        args.count, args.seed, model_cfg.image_size, patch_size=model_cfg.patch_size
    )
    fused = [
        fuse_info_scores(patch_info_score(p.rgb), patch_info_score(p.other))
        for p in pairs
    ]
    probs = assign_mask_probabilities(fused)
    rho = substitution_probability(args.epoch, train_cfg.substitution)
    for i, (pair, pm) in enumerate(zip(pairs, probs)):
        m_rgb = sample_masks(pm, args.seed * 1000 + 2 * i)
        m_other = sample_masks(pm, args.seed * 1000 + 2 * i + 1)
        subst = substituted_positions(m_other, rho, args.seed * 1000 + 2 * i + 1)
        stem = pair.pair_id
        write_mask_png(pair.rgb, m_rgb, out / f"{stem}_mask_rgb.png")
        write_mask_png(pair.other, m_other, out / f"{stem}_mask_other.png", subst)
    print(f"wrote {2 * len(pairs)} mask visualizations to {out}")
    return 0


def cmd_losses_check(args) -> int:
    ok = losses_check.run_all(verbose=True)
    return 0 if ok else 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pairmask",
        description="Multi-modal masked pretraining toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="YAML config file (model/train sections)")
        p.add_argument(
            "--set",
            action="append",
            metavar="KEY=VALUE",
            help="dotted config override, e.g. train.base_lr=1e-4",
        )
        p.add_argument("--out", help="output directory (default $PAIRMASK_OUT or .)")

    p = sub.add_parser("gen-synth", help="write a synthetic dataset + manifest")
    p.add_argument("--count", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("pretrain", help="run pretraining")
    add_common(p)
    p.add_argument("--manifest", help="dataset manifest (default: synthetic in-memory)")
    p.add_argument("--count", type=int, default=32, help="synthetic pair count")
    p.add_argument("--resume-from", help="checkpoint stem to resume from")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", help="linear-probe benchmark vs random init")
    add_common(p)
    p.add_argument("--variant", choices=VARIANTS, default="full")
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--epochs", type=int, default=8)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("finetune", help="small-scale fine-tuning protocol")
    add_common(p)
    p.add_argument("--epochs", type=int, default=8, help="pretraining epochs")
    p.add_argument("--ft-epochs", type=int, default=5, help="fine-tuning epochs")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("mask-viz", help="write mask/substitution PNGs")
    add_common(p)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epoch", type=int, default=0, help="epoch for the rho schedule")
    p.set_defaults(func=cmd_mask_viz)

    p = sub.add_parser("losses-check", help="run loss oracle/gradient verification")
    p.set_defaults(func=cmd_losses_check)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
