"""Anomaly maps from Mahalanobis distances to the support grid."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .affine import AffineParams, apply_affine, invert_affine
from .dataio import ImageSample, preprocess, to_tensor
from .normest import GaussianGrid, extract_pool_features


class GridMismatchError(ValueError):
    """Features, checkpoint and grid disagree on shape or configuration."""


@dataclass
class ScoreConfig:
    smooth_sigma: float = 4.0
    batch_size: int = 16


@dataclass
class AnomalyMap:
    grid_scores: np.ndarray    # H x W, feature-grid coordinates
    image_scores: np.ndarray   # side x side, aligned with the input image
    image_score: float


def mahalanobis_map(features: np.ndarray, grid: GaussianGrid, chunk: int = 512) -> np.ndarray:
    """Distance of each position's feature to its Gaussian.

    ``features`` is H x W x C or B x H x W x C; solves against the cached
    Cholesky factor in float64.
    """
    feats = np.asarray(features)
    single = feats.ndim == 3
    if single:
        feats = feats[None]
    if feats.shape[1:] != grid.mean.shape:
        raise GridMismatchError(f"feature shape {feats.shape[1:]} does not match "
                                f"grid shape {grid.mean.shape}")
    b, h, w, c = feats.shape
    positions = h * w
    flat = feats.reshape(b, positions, c)
    mean = grid.mean.reshape(positions, c)
    chol = grid.cov_cholesky.reshape(positions, c, c)
    out = np.empty((b, positions))
    for start in range(0, positions, chunk):
        stop = min(start + chunk, positions)
        diff = torch.from_numpy(np.asarray(flat[:, start:stop], dtype=np.float64)
                                - np.asarray(mean[start:stop], dtype=np.float64))
        factor = torch.from_numpy(np.asarray(chol[start:stop], dtype=np.float64))
        y = torch.linalg.solve_triangular(factor, diff.permute(1, 2, 0), upper=False)
        out[:, start:stop] = y.square().sum(dim=1).sqrt().T.numpy()
    out = out.reshape(b, h, w)
    return out[0] if single else out


def realign_map(scores: np.ndarray, params: Sequence[AffineParams]) -> np.ndarray:
    """Undo the stage transforms in reverse stage order at grid resolution.

    Out-of-bounds regions read zero (treated as normal).
    """
    out = torch.from_numpy(np.asarray(scores, dtype=np.float64))[None, None]
    for p in reversed(list(params)):
        out = apply_affine(out, invert_affine(p))
    return out[0, 0].numpy()


def finalize_map(realigned: np.ndarray, side: int, smooth_sigma: float = 0.0) -> AnomalyMap:
    if side <= 0:
        raise ValueError("side must be positive")
    t = torch.from_numpy(np.asarray(realigned, dtype=np.float64))[None, None]
    up = F.interpolate(t, size=(side, side), mode="bilinear", align_corners=False)[0, 0].numpy()
    if smooth_sigma > 0:
        up = ndimage.gaussian_filter(up, sigma=smooth_sigma, mode="reflect")
    return AnomalyMap(np.asarray(realigned), up, float(up.max()))


def check_compatible(model, grid: GaussianGrid) -> None:
    meta = grid.meta
    cfg = model.cfg
    for key, expected in (("stn_mode", cfg.stn_mode), ("side", str(cfg.side)),
                          ("stn_chain", cfg.stn_chain)):
        if key in meta and meta[key] != expected:
            raise GridMismatchError(f"grid {key}={meta[key]!r} but checkpoint has {expected!r}")


def score_images(samples: Sequence[ImageSample], model, grid: GaussianGrid,
                 cfg: ScoreConfig = ScoreConfig()) -> List[AnomalyMap]:
    """Score test images; no test-time augmentation."""
    check_compatible(model, grid)
    side = model.cfg.side
    source = grid.meta.get("est_source", "stn")
    mode = model.cfg.stn_mode
    model.eval()
    maps: List[AnomalyMap] = []
    with torch.no_grad():
        for start in range(0, len(samples), cfg.batch_size):
            batch = [preprocess(s, side) for s in samples[start:start + cfg.batch_size]]
            feats, fs = extract_pool_features(model, to_tensor(batch), source)
            arr = feats.numpy()
            if grid.channel_index is not None:
                arr = arr[..., grid.channel_index]
            dists = mahalanobis_map(arr, grid)
            for i in range(len(batch)):
                realigned = realign_map(dists[i], fs.params(i, mode))
                amap = finalize_map(realigned, side, cfg.smooth_sigma)
                maps.append(AnomalyMap(dists[i], amap.image_scores, amap.image_score))
    return maps


def score_image(sample: ImageSample, model, grid: GaussianGrid,
                cfg: ScoreConfig = ScoreConfig()) -> AnomalyMap:
    return score_images([sample], model, grid, cfg)[0]


def heatmap_rgb(scores: np.ndarray, cmap: str = "jet") -> np.ndarray:
    """Min-max normalized color-ramp rendering as uint8 RGB."""
    from matplotlib import colormaps

    lo, hi = float(scores.min()), float(scores.max())
    norm = (scores - lo) / (hi - lo) if hi > lo else np.zeros_like(scores)
    rgba = colormaps[cmap](norm)
    return (rgba[..., :3] * 255).round().astype(np.uint8)
