"""Command-line surface: dataset synthesis, training, sampling, evaluation.

Exit codes: 0 on success, 2 on usage/configuration/data errors, 3 on
numeric failures.  `MEDFLOWSEG_SEED` provides a global seed fallback for
any command whose --seed flag is not given.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import (
    MaskEncoding,
    SyntheticSpec,
    encode_mask,
    generate_synthetic,
    load_dataset,
    load_label_png,
    overlay_image,
    read_manifest,
    save_label_png,
)
from .errors import ConfigurationError, DataError, MedFlowSegError, NumericError
from .metrics import aggregate_reports, evaluate_pair
from .sampling import OracleVelocityModel, SamplerConfig, sample_ensemble
from .training import Trainer, build_model, load_model_from_checkpoint

LOCK_NAME = ".lock"


def _env_seed(value: int | None, default: int = 0) -> int:
    if value is not None:
        return value
    return int(os.environ.get("MEDFLOWSEG_SEED", default))


@contextmanager
def run_dir_lock(run_dir: Path):
    """One process owns a run directory; a stale lock must be removed manually."""
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise DataError(f"run directory {run_dir} is locked by {lock}") from None
    os.write(fd, f"{os.getpid()}\n".encode())
    os.close(fd)
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


def cmd_synth(args: argparse.Namespace) -> int:
    spec = SyntheticSpec(
        count=args.count,
        resolution=args.resolution,
        num_classes=args.num_classes,
        noise=args.noise,
        seed=_env_seed(args.seed),
    )
    manifest = generate_synthetic(spec, args.out)
    print(manifest)
    return 0


def _load_run_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {
        "resolution": getattr(args, "resolution", None),
        "seed": getattr(args, "seed", None),
        "train.lr": getattr(args, "lr", None),
        "train.batch_size": getattr(args, "batch_size", None),
        "train.max_steps": getattr(args, "steps", None),
        "sampler.steps": getattr(args, "sample_steps", None),
        "sampler.runs": getattr(args, "runs", None),
        "backbone.num_classes": getattr(args, "num_classes", None),
        "backbone.flow_channels": getattr(args, "num_classes", None),
    }
    if getattr(args, "widths", None):
        overrides["backbone.widths"] = [int(w) for w in args.widths.split(",")]
        overrides["backbone.stages"] = len(overrides["backbone.widths"])
    if getattr(args, "no_dbsa", False):
        overrides["backbone.use_dbsa"] = False
    if getattr(args, "no_fa_attention", False):
        overrides["backbone.use_fa_attention"] = False
    if getattr(args, "no_modulator", False):
        overrides["fa.use_modulator"] = False
    cfg = cfg.replace_fields(**overrides)
    if "MEDFLOWSEG_SEED" in os.environ and getattr(args, "seed", None) is None:
        cfg = cfg.replace_fields(seed=int(os.environ["MEDFLOWSEG_SEED"]))
    return cfg


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _load_run_config(args)
    manifest = read_manifest(args.data)
    if int(manifest["num_classes"]) != cfg.backbone.num_classes:
        raise ConfigurationError(
            f"dataset has {manifest['num_classes']} classes, config expects "
            f"{cfg.backbone.num_classes}"
        )
    samples = load_dataset(args.data, resolution=cfg.resolution)
    run_dir = Path(args.out)
    with run_dir_lock(run_dir):
        cfg.save(run_dir / "config.json")
        train_cfg = dataclasses.replace(cfg.train, seed=cfg.seed)
        model = build_model(cfg.backbone, cfg.fa, seed=cfg.seed)
        trainer = Trainer(
            model,
            samples,
            train_cfg,
            weights=cfg.weights,
            encoding=MaskEncoding(cfg.backbone.num_classes),
            run_dir=run_dir,
        )
        checkpoint = run_dir / "checkpoint.pt"
        if args.resume and checkpoint.exists():
            trainer.load_checkpoint(checkpoint)
            print(f"resumed at step {trainer.step}")
        records = trainer.run()
        trainer.save_checkpoint(checkpoint)
    if records:
        print(
            f"trained to step {trainer.step}: total_loss "
            f"{records[0]['total_loss']:.4f} -> {records[-1]['total_loss']:.4f}"
        )
    print(checkpoint)
    return 0


def _iter_case_images(images_root: Path, resolution: int, num_classes: int):
    if (images_root / "images").is_dir():
        return load_dataset(images_root, resolution=resolution, num_classes=num_classes)
    raise DataError(f"{images_root} must contain an images/ directory")


def cmd_sample(args: argparse.Namespace) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = _env_seed(args.seed)

    if args.oracle_masks:
        manifest = read_manifest(Path(args.oracle_masks))
        model = None
    else:
        model, manifest = load_model_from_checkpoint(args.checkpoint)
    num_classes = int(manifest["num_classes"])
    resolution = int(manifest["resolution"])
    if args.num_classes is not None and args.num_classes != num_classes:
        raise ConfigurationError(
            f"requested {args.num_classes} classes but checkpoint/dataset has {num_classes}"
        )
    if args.resolution is not None and args.resolution != resolution:
        raise ConfigurationError(
            f"requested resolution {args.resolution} but checkpoint/dataset has {resolution}"
        )

    encoding = MaskEncoding(num_classes)
    cases = _iter_case_images(Path(args.images), resolution, num_classes)
    if args.oracle_masks:
        oracle_cases = {
            s.id: s.labelmap
            for s in load_dataset(args.oracle_masks, resolution=resolution, num_classes=num_classes)
        }

    sampler_cfg = SamplerConfig(steps=args.steps, runs=args.runs, seed=seed)
    runs_dir = out_dir / "runs"
    overlays_dir = out_dir / "overlays"
    reliability: dict[str, dict] = {}
    for index, sample in enumerate(cases):
        if args.oracle_masks:
            if sample.id not in oracle_cases:
                raise DataError(f"no oracle mask for case {sample.id}")
            case_model = OracleVelocityModel(encode_mask(oracle_cases[sample.id], encoding))
        else:
            case_model = model
        case_cfg = dataclasses.replace(sampler_cfg, seed=seed + index)
        result = sample_ensemble(case_model, sample.image, encoding, case_cfg)
        save_label_png(out_dir / f"{sample.id}.png", result.fused.numpy())
        if args.per_run:
            runs_dir.mkdir(exist_ok=True)
            for r in range(case_cfg.runs):
                save_label_png(
                    runs_dir / f"{sample.id}_run{r:02d}.png", result.run_labels[r].numpy()
                )
        if args.overlay:
            overlays_dir.mkdir(exist_ok=True)
            gray = ((sample.image[0].numpy() + 1.0) * 127.5).clip(0, 255)
            overlay_image(gray, result.fused.numpy()).save(
                overlays_dir / f"{sample.id}.png"
            )
        reliability[sample.id] = {
            "sensitivity": np.where(
                np.isnan(result.sensitivity), None, result.sensitivity.round(8)
            ).tolist(),
            "specificity": np.where(
                np.isnan(result.specificity), None, result.specificity.round(8)
            ).tolist(),
            "degenerate_classes": result.degenerate_classes,
        }
    (out_dir / "reliability.json").write_text(
        json.dumps(reliability, indent=2, sort_keys=True) + "\n"
    )
    (out_dir / "sample_config.json").write_text(
        json.dumps(
            {"steps": args.steps, "runs": args.runs, "seed": seed, "cases": len(cases)},
            indent=2,
            sort_keys=True,
        )
        + "\n"
    )
    print(out_dir)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    pred_dir = Path(args.pred)
    gt_root = Path(args.gt)
    masks_dir = gt_root / "masks" if (gt_root / "masks").is_dir() else gt_root
    num_classes = args.num_classes
    if num_classes is None:
        num_classes = int(read_manifest(gt_root)["num_classes"])

    gt_files = {p.stem: p for p in sorted(masks_dir.glob("*.png"))}
    if not gt_files:
        raise DataError(f"no ground-truth masks found in {masks_dir}")
    reports = {}
    for stem, gt_path in gt_files.items():
        pred_path = pred_dir / f"{stem}.png"
        if not pred_path.exists():
            raise DataError(f"missing prediction for case {stem}")
        reports[stem] = evaluate_pair(
            load_label_png(pred_path), load_label_png(gt_path), num_classes
        )

    aggregate = aggregate_reports(reports)
    payload = {
        "aggregate": aggregate,
        "cases": {stem: r.to_dict() for stem, r in reports.items()},
    }
    report_path = Path(args.out)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    csv_path = report_path.with_suffix(".csv")
    with csv_path.open("w") as fh:
        fh.write("case,mean_dice,mean_iou,mean_hd95\n")
        for stem, r in sorted(reports.items()):
            fh.write(f"{stem},{r.mean_dice:.6f},{r.mean_iou:.6f},{r.mean_hd95:.6f}\n")
        fh.write(
            f"aggregate,{aggregate['mean_dice']:.6f},{aggregate['mean_iou']:.6f},"
            f"{aggregate['mean_hd95']:.6f}\n"
        )
    print(
        f"cases={aggregate['cases']} mean_dice={aggregate['mean_dice']:.4f} "
        f"mean_iou={aggregate['mean_iou']:.4f} mean_hd95={aggregate['mean_hd95']:.4f}"
    )
    print(report_path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="medflowseg")
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic shapes dataset")
    p_synth.add_argument("--count", type=int, required=True)
    p_synth.add_argument("--resolution", type=int, default=64)
    p_synth.add_argument("--num-classes", type=int, default=3)
    p_synth.add_argument("--noise", type=float, default=0.05)
    p_synth.add_argument("--seed", type=int, default=None)
    p_synth.add_argument("--out", required=True)
    p_synth.set_defaults(func=cmd_synth)

    p_train = sub.add_parser("train", help="train on a dataset directory")
    p_train.add_argument("--data", required=True)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--config", default=None)
    p_train.add_argument("--resolution", type=int, default=None)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--lr", type=float, default=None)
    p_train.add_argument("--batch-size", type=int, default=None)
    p_train.add_argument("--steps", type=int, default=None)
    p_train.add_argument("--num-classes", type=int, default=None)
    p_train.add_argument("--widths", default=None, help="comma-separated stage widths")
    p_train.add_argument("--no-dbsa", action="store_true")
    p_train.add_argument("--no-fa-attention", action="store_true")
    p_train.add_argument("--no-modulator", action="store_true")
    p_train.add_argument("--resume", action="store_true")
    p_train.set_defaults(func=cmd_train)

    p_sample = sub.add_parser("sample", help="sample segmentations for a dataset")
    p_sample.add_argument("--checkpoint", default=None)
    p_sample.add_argument("--images", required=True, help="dataset root with images/")
    p_sample.add_argument("--out", required=True)
    p_sample.add_argument("--steps", type=int, default=50)
    p_sample.add_argument("--runs", type=int, default=10)
    p_sample.add_argument("--seed", type=int, default=None)
    p_sample.add_argument("--resolution", type=int, default=None)
    p_sample.add_argument("--num-classes", type=int, default=None)
    p_sample.add_argument("--per-run", action="store_true")
    p_sample.add_argument("--overlay", action="store_true")
    p_sample.add_argument(
        "--oracle-masks",
        default=None,
        help="dataset root with ground-truth masks; replaces the network with the exact constant field",
    )
    p_sample.set_defaults(func=cmd_sample)

    p_eval = sub.add_parser("eval", help="score predictions against ground truth")
    p_eval.add_argument("--pred", required=True)
    p_eval.add_argument("--gt", required=True)
    p_eval.add_argument("--out", default="report.json")
    p_eval.add_argument("--num-classes", type=int, default=None)
    p_eval.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "sample" and not args.checkpoint and not args.oracle_masks:
        parser.error("sample requires --checkpoint or --oracle-masks")
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (MedFlowSegError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
