"""Command line entry point: ``regad {synth,train,estimate,score,eval,bench}``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch
from PIL import Image

from .config import RunConfig, write_run_files
from .dataio import (
    ImageSample,
    generate_synthetic,
    load_dataset,
    make_loo_split,
    sample_support,
)
from .dataio.samples import DATASET_KINDS
from .affine import MODES
from .evalkit import (
    EvalReport,
    evaluate_category,
    run_benchmark,
    write_report_csv,
    write_summary_csv,
)
from .normest import estimate, load_grid, save_grid
from .regtrain import MODEL_FILE, file_sha256, load_checkpoint, train
from .scoring import heatmap_rgb, score_image

log = logging.getLogger("regad")


def _offsets(text: str):
    out = []
    for item in text.split(","):
        dx, dy = item.split(":")
        out.append((float(dx), float(dy)))
    return out


def _floats(text: str):
    return [float(v) for v in text.split(",") if v]


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML run configuration")
    p.add_argument("--seed", type=int, help="global seed")
    p.add_argument("--jobs", type=int, help="torch intra-op threads (determinism only at 1)")
    p.add_argument("--log-level", default="INFO")


def _add_data(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data-root", type=Path, help="dataset root (or data_root in --config)")
    p.add_argument("--dataset-kind", choices=DATASET_KINDS)


def _add_train(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--momentum", type=float)
    g.add_argument("--stn-mode", choices=MODES)
    g.add_argument("--stn-chain", choices=("pre", "post"))
    g.add_argument("--backbone", help="imagenet | random | path to ResNet-18 state dict")
    g.add_argument("--freeze-backbone", action="store_true", default=None)
    g.add_argument("--side", type=int)


def _add_adapt(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("adaptation")
    g.add_argument("--k", type=int)
    g.add_argument("--epsilon", type=float)
    g.add_argument("--reduce-dims", type=int)
    g.add_argument("--est-source", choices=("stn", "encoder"))
    g.add_argument("--no-gray", action="store_true")
    g.add_argument("--no-flip", action="store_true")
    g.add_argument("--no-rotate", action="store_true")
    g.add_argument("--no-translate", action="store_true")
    g.add_argument("--rotations", type=_floats, help="comma-separated degrees")
    g.add_argument("--translations", type=_offsets, help="dx:dy pairs, comma-separated")
    g.add_argument("--flip-axes", type=lambda s: s.split(","))


def _add_score(p: argparse.ArgumentParser) -> None:
    p.add_argument("--smooth-sigma", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="regad", description="Registration-based few-shot "
                                     "anomaly detection")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic MVTec-layout dataset")
    _add_common(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--categories", type=int, default=3)
    p.add_argument("--train-per-cat", type=int, default=10)
    p.add_argument("--test-per-cat", type=int, default=10)
    p.add_argument("--size", type=int, default=224)

    p = sub.add_parser("train", help="aggregated registration training")
    _add_common(p)
    _add_data(p)
    _add_train(p)
    p.add_argument("--target", help="leave-one-out category to exclude")
    p.add_argument("--out", type=Path, required=True, help="checkpoint directory")

    p = sub.add_parser("estimate", help="fit the Gaussian grid of a category")
    _add_common(p)
    _add_data(p)
    _add_adapt(p)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--category", required=True)
    p.add_argument("--out", type=Path, required=True, help="stats archive path")

    p = sub.add_parser("score", help="score one image")
    _add_common(p)
    _add_score(p)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--stats", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--out-heatmap", type=Path)
    p.add_argument("--out-score", default="-", help="file path or - for stdout")

    p = sub.add_parser("eval", help="k-shot evaluation of one category with a given checkpoint")
    _add_common(p)
    _add_data(p)
    _add_adapt(p)
    _add_score(p)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--category", required=True)
    p.add_argument("--runs", type=int)
    p.add_argument("--out", type=Path, required=True, help="report directory")
    p.add_argument("--dump-heatmaps", type=Path)
    p.add_argument("--pixel-auc-mode", choices=("pooled", "per_image"))

    p = sub.add_parser("bench", help="leave-one-out benchmark over categories")
    _add_common(p)
    _add_data(p)
    _add_train(p)
    _add_adapt(p)
    _add_score(p)
    p.add_argument("--categories", type=lambda s: s.split(","))
    p.add_argument("--runs", type=int)
    p.add_argument("--ckpt", type=Path, help="reuse one checkpoint for every target")
    p.add_argument("--out", type=Path, required=True, help="report directory")
    p.add_argument("--dump-heatmaps", type=Path)
    p.add_argument("--pixel-auc-mode", choices=("pooled", "per_image"))
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    get = lambda name: getattr(args, name, None)  # noqa: E731
    if get("seed") is not None:
        cfg.seed = args.seed
        cfg.train = replace(cfg.train, seed=args.seed)
        cfg.eval = replace(cfg.eval, base_seed=args.seed)
    if get("jobs") is not None:
        cfg.jobs = args.jobs
    if get("data_root") is not None:
        cfg.data_root = str(args.data_root)
    if get("dataset_kind") is not None:
        cfg.dataset_kind = args.dataset_kind

    train_over = {k: get(k) for k in ("epochs", "batch_size", "lr", "momentum", "stn_mode",
                                      "stn_chain", "backbone", "freeze_backbone", "side")}
    cfg.train = replace(cfg.train, **{k: v for k, v in train_over.items() if v is not None})

    aug = cfg.aug
    aug_over = {}
    for flag, name in (("no_gray", "enable_gray"), ("no_flip", "enable_flip"),
                       ("no_rotate", "enable_rotate"), ("no_translate", "enable_translate")):
        if get(flag):
            aug_over[name] = False
    for flag, name in (("rotations", "rotation_angles"), ("translations", "translation_offsets"),
                       ("flip_axes", "flip_axes")):
        if get(flag) is not None:
            aug_over[name] = get(flag)
    cfg.aug = replace(aug, **aug_over)

    est_over = {"epsilon": get("epsilon"), "reduce_dims": get("reduce_dims"),
                "est_source": get("est_source")}
    cfg.estimate = replace(cfg.estimate, **{k: v for k, v in est_over.items() if v is not None})
    if get("smooth_sigma") is not None:
        cfg.score = replace(cfg.score, smooth_sigma=args.smooth_sigma)
    eval_over = {"k": get("k"), "n_runs": get("runs"), "pixel_auc_mode": get("pixel_auc_mode")}
    cfg.eval = replace(cfg.eval, **{k: v for k, v in eval_over.items() if v is not None})
    return cfg


def _require_root(cfg: RunConfig) -> str:
    if not cfg.data_root:
        raise ValueError("--data-root is required (or data_root in --config)")
    return cfg.data_root


def cmd_synth(args, cfg: RunConfig) -> List[Path]:
    names = generate_synthetic(args.out, args.categories, args.train_per_cat,
                               args.test_per_cat, cfg.seed, args.size)
    print(f"wrote {len(names)} categories to {args.out}")
    return [args.out / n for n in names]


def cmd_train(args, cfg: RunConfig) -> List[Path]:
    samples = load_dataset(_require_root(cfg), cfg.dataset_kind)
    if args.target:
        pool, _ = make_loo_split(samples, args.target)
    else:
        pool = [s for s in samples if s.split == "train"]
    result = train(pool, cfg.train, args.out)
    print(f"trained {cfg.train.epochs} epochs, final loss {result.final_loss:.6f}")
    return [args.out / MODEL_FILE, args.out / "meta.txt", args.out / "train_log.csv"]


def cmd_estimate(args, cfg: RunConfig) -> List[Path]:
    samples = load_dataset(_require_root(cfg), cfg.dataset_kind)
    model, _, _ = load_checkpoint(args.ckpt)
    support = sample_support(samples, args.category, cfg.eval.k, cfg.seed)
    grid = estimate(support, model, cfg.aug, cfg.estimate, file_sha256(args.ckpt / MODEL_FILE))
    save_grid(grid, args.out)
    print(f"N={grid.n} adaptation_seconds={grid.meta['adaptation_seconds']}")
    return [args.out]


def cmd_score(args, cfg: RunConfig) -> List[Path]:
    model, _, _ = load_checkpoint(args.ckpt)
    grid = load_grid(args.stats)
    sample = ImageSample("unknown", "test", "normal", str(args.image))
    amap = score_image(sample, model, grid, cfg.score)
    produced = []
    if args.out_heatmap:
        args.out_heatmap.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(heatmap_rgb(amap.image_scores)).save(args.out_heatmap)
        produced.append(args.out_heatmap)
    text = f"{amap.image_score:.6f}"
    if args.out_score == "-":
        print(text)
    else:
        Path(args.out_score).write_text(text + "\n")
        produced.append(Path(args.out_score))
    return produced


def _write_reports(reports: List[EvalReport], out: Path) -> List[Path]:
    paths = [write_report_csv(reports, out / "report.csv"),
             write_summary_csv(reports, out / "summary.csv")]
    for rep in reports:
        print(f"{rep.category:>20s} k={rep.k} image AUC {rep.mean_image_auc:.4f} "
              f"pixel AUC {rep.mean_pixel_auc:.4f}")
    return paths


def cmd_eval(args, cfg: RunConfig) -> List[Path]:
    samples = load_dataset(_require_root(cfg), cfg.dataset_kind)
    model, _, _ = load_checkpoint(args.ckpt)
    sha = file_sha256(args.ckpt / MODEL_FILE)
    report = evaluate_category(model, samples, args.category, cfg.eval, cfg.aug,
                               cfg.estimate, cfg.score, args.dump_heatmaps, sha)
    return _write_reports([report], args.out)


def cmd_bench(args, cfg: RunConfig) -> List[Path]:
    produced: List[Path] = []

    def model_for(target, train_pool):
        if args.ckpt:
            model, _, _ = load_checkpoint(args.ckpt)
            return model, file_sha256(args.ckpt / MODEL_FILE)
        ckpt_dir = args.out / "ckpt" / target
        result = train(train_pool, cfg.train, ckpt_dir)
        produced.extend([ckpt_dir / MODEL_FILE, ckpt_dir / "meta.txt",
                         ckpt_dir / "train_log.csv"])
        return result.model, file_sha256(ckpt_dir / MODEL_FILE)

    reports = run_benchmark(_require_root(cfg), cfg.dataset_kind, args.categories, cfg.eval,
                            cfg.aug, cfg.estimate, cfg.score, model_for, args.dump_heatmaps)
    return produced + _write_reports(reports, args.out)


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "estimate": cmd_estimate,
            "score": cmd_score, "eval": cmd_eval, "bench": cmd_bench}


def _run_dir(args) -> Path:
    if args.command == "estimate":
        return args.out.parent
    if args.command == "score":
        return args.out_heatmap.parent if args.out_heatmap else Path.cwd()
    return args.out


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        torch.set_num_threads(max(1, cfg.jobs))
        np.random.seed(cfg.seed)
        produced = COMMANDS[args.command](args, cfg)
        write_run_files(_run_dir(args), cfg, produced)
    except Exception as exc:  # noqa: BLE001 - single-line error class for the shell
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
