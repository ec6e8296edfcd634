"""AUROC metrics and the leave-one-out k-shot benchmark."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .dataio import (
    AugmentationConfig,
    ImageSample,
    categories_of,
    load_dataset,
    make_loo_split,
    preprocess,
    sample_support,
)
from .normest import EstimateConfig, estimate
from .scoring import AnomalyMap, ScoreConfig, heatmap_rgb, score_images

log = logging.getLogger(__name__)


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC with midranks for ties, O(n log n).

    Equals P(s+ > s-) + 0.5 P(s+ == s-) over positive/negative pairs.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if np.isnan(s).any():
        raise ValueError("scores contain NaN")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both positive and negative labels")
    _, inverse, counts = np.unique(s, return_inverse=True, return_counts=True)
    midranks = np.cumsum(counts) - (counts - 1) / 2.0
    rank_sum = midranks[inverse][y].sum()
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pixel_auroc(maps: Sequence, masks: Sequence[np.ndarray], mode: str = "pooled") -> float:
    """Pixel-level AUROC over a category's test set.

    ``maps`` holds AnomalyMaps or plain score arrays aligned with ``masks``.
    ``pooled`` ranks all pixels together; ``per_image`` averages the AUROC of
    every image whose mask has both defect and background pixels.
    """
    scores = [m.image_scores if isinstance(m, AnomalyMap) else np.asarray(m) for m in maps]
    if len(scores) != len(masks):
        raise ValueError("maps and masks differ in count")
    for sc, mk in zip(scores, masks):
        if sc.shape != np.shape(mk):
            raise ValueError(f"map shape {sc.shape} does not match mask shape {np.shape(mk)}")
    if mode == "pooled":
        all_masks = np.concatenate([np.asarray(m).ravel() for m in masks]) > 0
        if not all_masks.any():
            raise ValueError("no defect pixels in the pool")
        return auroc(np.concatenate([s.ravel() for s in scores]), all_masks)
    if mode == "per_image":
        values = []
        for sc, mk in zip(scores, masks):
            mk = np.asarray(mk) > 0
            if mk.any() and not mk.all():
                values.append(auroc(sc, mk))
        if not values:
            raise ValueError("no defect pixels in the pool")
        return float(np.mean(values))
    raise ValueError(f"unknown pixel AUROC mode {mode!r}")


@dataclass
class RunResult:
    seed: int
    image_auc: float
    pixel_auc: float
    adaptation_seconds: float


@dataclass
class EvalReport:
    category: str
    k: int
    runs: List[RunResult] = field(default_factory=list)

    @property
    def mean_image_auc(self) -> float:
        return float(np.mean([r.image_auc for r in self.runs]))

    @property
    def mean_pixel_auc(self) -> float:
        return float(np.mean([r.pixel_auc for r in self.runs]))

    @property
    def std_image_auc(self) -> float:
        return float(np.std([r.image_auc for r in self.runs]))

    @property
    def std_pixel_auc(self) -> float:
        return float(np.std([r.pixel_auc for r in self.runs]))


@dataclass
class EvalConfig:
    k: int = 2
    n_runs: int = 10
    base_seed: int = 0
    pixel_auc_mode: str = "pooled"


def _masks_for(test_pool: Sequence[ImageSample], side: int) -> List[np.ndarray]:
    masks = []
    for s in test_pool:
        m = preprocess(s, side, standardize_pixels=False).mask
        masks.append(np.zeros((side, side), np.uint8) if m is None else m)
    return masks


def evaluate_category(model, samples: Sequence[ImageSample], category: str,
                      eval_cfg: EvalConfig, aug_cfg: AugmentationConfig,
                      est_cfg: EstimateConfig, score_cfg: ScoreConfig,
                      dump_heatmaps: Optional[Path] = None, ckpt_sha256: str = "") -> EvalReport:
    """``n_runs`` support draws (seed = base_seed + r), each estimated and scored."""
    _, test_pool = make_loo_split(samples, category)
    side = model.cfg.side
    labels = np.array([s.is_anomalous for s in test_pool])
    masks = _masks_for(test_pool, side)
    report = EvalReport(category, eval_cfg.k)
    for r in range(eval_cfg.n_runs):
        seed = eval_cfg.base_seed + r
        support = sample_support(samples, category, eval_cfg.k, seed)
        grid = estimate(support, model, aug_cfg, est_cfg, ckpt_sha256)
        maps = score_images(test_pool, model, grid, score_cfg)
        image_auc = auroc([m.image_score for m in maps], labels)
        pix = (pixel_auroc(maps, masks, eval_cfg.pixel_auc_mode)
               if any(m.any() for m in masks) else float("nan"))
        secs = float(grid.meta["adaptation_seconds"])
        report.runs.append(RunResult(seed, image_auc, pix, secs))
        log.info("%s k=%d seed=%d image AUC %.4f pixel AUC %.4f",
                 category, eval_cfg.k, seed, image_auc, pix)
        if dump_heatmaps is not None:
            out = Path(dump_heatmaps) / category / f"seed{seed}"
            out.mkdir(parents=True, exist_ok=True)
            for s, m in zip(test_pool, maps):
                name = f"{s.defect_type}_{Path(s.source_path).stem}.png"
                Image.fromarray(heatmap_rgb(m.image_scores)).save(out / name)
    return report


def run_benchmark(data_root, dataset_kind: str, categories: Optional[Sequence[str]],
                  eval_cfg: EvalConfig, aug_cfg: AugmentationConfig,
                  est_cfg: EstimateConfig, score_cfg: ScoreConfig,
                  model_for: Callable[[str, List[ImageSample]], Tuple[object, str]],
                  dump_heatmaps: Optional[Path] = None) -> List[EvalReport]:
    """Leave-one-out benchmark.

    ``model_for(target, train_pool)`` returns ``(model, ckpt_sha256)`` for a
    target category: a freshly trained leave-one-out model or a shared one.
    """
    samples = load_dataset(data_root, dataset_kind)
    targets = list(categories) if categories else categories_of(samples)
    reports = []
    for target in targets:
        train_pool, _ = make_loo_split(samples, target)
        model, sha = model_for(target, train_pool)
        reports.append(evaluate_category(model, samples, target, eval_cfg, aug_cfg,
                                         est_cfg, score_cfg, dump_heatmaps, sha))
    return reports


def macro_average(reports: Sequence[EvalReport]) -> Tuple[float, float]:
    """Unweighted mean over categories of the per-category run means."""
    return (float(np.mean([r.mean_image_auc for r in reports])),
            float(np.mean([r.mean_pixel_auc for r in reports])))


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def write_report_csv(reports: Sequence[EvalReport], path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["category", "k", "seed", "image_auc", "pixel_auc", "adapt_seconds"])
        for rep in reports:
            for run in rep.runs:
                w.writerow([rep.category, rep.k, run.seed, _fmt(run.image_auc),
                            _fmt(run.pixel_auc), f"{run.adaptation_seconds:.3f}"])
    return path


def write_summary_csv(reports: Sequence[EvalReport], path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["category", "k", "runs", "mean_image_auc", "std_image_auc",
                    "mean_pixel_auc", "std_pixel_auc"])
        for rep in reports:
            w.writerow([rep.category, rep.k, len(rep.runs), _fmt(rep.mean_image_auc),
                        _fmt(rep.std_image_auc), _fmt(rep.mean_pixel_auc),
                        _fmt(rep.std_pixel_auc)])
        if reports:
            img, pix = macro_average(reports)
            w.writerow(["macro_average", reports[0].k, len(reports[0].runs), _fmt(img), "",
                        _fmt(pix), ""])
    return path
