"""Per-position Gaussian model of registered support features.

Every feature-map position (i, j) gets a mean and a covariance
``cov = scatter / (N - 1) + eps * I``; only the Cholesky factor of the
covariance is kept, so scoring never forms an explicit inverse.
"""

from __future__ import annotations

import logging
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .dataio import AugmentationConfig, SupportSet, build_support_pool, preprocess, to_tensor
from .dataio.preprocess import standardize
from .featnet import FeatureSet

log = logging.getLogger(__name__)

# Pool feature arrays beyond this many bytes are spilled to a temp memmap.
IN_MEMORY_LIMIT = 1 << 30


class GridFitError(RuntimeError):
    pass


@dataclass
class EstimateConfig:
    epsilon: float = 0.01
    est_source: str = "stn"
    reduce_dims: Optional[int] = None
    dims_seed: int = 0
    batch_size: int = 16

    def __post_init__(self) -> None:
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.est_source not in ("stn", "encoder"):
            raise ValueError(f"est_source must be 'stn' or 'encoder', got {self.est_source!r}")
        if self.reduce_dims is not None and self.reduce_dims <= 0:
            raise ValueError("reduce_dims must be positive")


@dataclass
class GaussianGrid:
    mean: np.ndarray            # H x W x C
    cov_cholesky: np.ndarray    # H x W x C x C, lower triangular
    epsilon: float
    n: int
    channel_index: Optional[np.ndarray] = None
    meta: Dict[str, str] = field(default_factory=dict)

    @property
    def shape(self):
        return self.mean.shape

    @property
    def cov(self) -> np.ndarray:
        """Covariances rebuilt from the cached factors."""
        chol = self.cov_cholesky.astype(np.float64)
        return chol @ np.swapaxes(chol, -1, -2)


def aggregate_features(post: Sequence[torch.Tensor]) -> torch.Tensor:
    """Upsample stages 2..n to stage-1 resolution and concatenate channels.

    Accepts a ``FeatureSet`` or its list of post-STN maps (B x C_i x H_i x W_i).
    """
    if isinstance(post, FeatureSet):
        post = post.post
    size = post[0].shape[-2:]
    maps = [post[0]]
    for f in post[1:]:
        maps.append(F.interpolate(f, size=size, mode="bilinear", align_corners=False))
    return torch.cat(maps, dim=1)


def select_channels(n_channels: int, reduce_dims: Optional[int], seed: int) -> Optional[np.ndarray]:
    """Fixed random channel subset, or ``None`` for all channels."""
    if reduce_dims is None or reduce_dims >= n_channels:
        return None
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n_channels, size=reduce_dims, replace=False))


def fit_gaussian_grid(features: np.ndarray, epsilon: float, out_dtype=np.float64,
                      chunk: int = 256) -> GaussianGrid:
    """Fit the grid to ``features`` of shape N x H x W x C.

    Uses an exact two-pass estimate per chunk of positions in float64, so
    ``features`` may be a memmap larger than RAM.
    """
    n = features.shape[0]
    if n < 2:
        raise GridFitError("need at least two pooled features")
    if not (np.isfinite(epsilon) and epsilon >= 0):
        raise ValueError("epsilon must be non-negative")
    _, h, w, c = features.shape
    positions = h * w
    flat = features.reshape(n, positions, c)
    mean = np.empty((positions, c), dtype=out_dtype)
    chol = np.empty((positions, c, c), dtype=out_dtype)
    eye = torch.eye(c, dtype=torch.float64)
    for start in range(0, positions, chunk):
        stop = min(start + chunk, positions)
        x = torch.from_numpy(np.asarray(flat[:, start:stop], dtype=np.float64))
        mu = x.mean(dim=0)
        d = (x - mu).permute(1, 2, 0)                       # P x C x N
        cov = d @ d.transpose(1, 2) / (n - 1) + epsilon * eye
        factor, info = torch.linalg.cholesky_ex(cov)
        if bool((info != 0).any()):
            pos = start + int(torch.nonzero(info)[0])
            raise GridFitError(f"covariance at position (i={pos // w}, j={pos % w}) "
                               "is not positive definite")
        mean[start:stop] = mu.numpy()
        chol[start:stop] = factor.numpy()
    return GaussianGrid(mean.reshape(h, w, c), chol.reshape(h, w, c, c), float(epsilon), n,
                        meta={"feature_shape": f"{h}x{w}x{c}"})


def extract_pool_features(model, images: torch.Tensor, est_source: str = "stn"):
    """Return (B x H x W x C features, FeatureSet) for a standardized batch."""
    fs = model.features(images)
    if est_source == "encoder":
        agg = model.encode(fs.post[2])
    else:
        agg = aggregate_features(fs.post)
    return agg.permute(0, 2, 3, 1), fs


def estimate(support: SupportSet, model, aug_cfg: AugmentationConfig,
             cfg: EstimateConfig, ckpt_sha256: str = "") -> GaussianGrid:
    """Fit the target category's grid from its augmented support pool.

    Runs the model strictly in inference mode; no parameter or buffer
    changes. Wall-clock time lands in ``meta["adaptation_seconds"]``.
    """
    start = time.perf_counter()
    side = model.cfg.side
    model.eval()
    resized = [preprocess(s, side, standardize_pixels=False) for s in support.samples]
    pool = build_support_pool(support, aug_cfg, images=resized)
    n = len(pool)
    storage = None
    channel_index = None
    tmp = None
    with torch.no_grad():
        for start_idx in range(0, n, cfg.batch_size):
            batch = pool[start_idx:start_idx + cfg.batch_size]
            x = to_tensor([s.with_data(standardize(s.pixels)) for s in batch])
            feats, _ = extract_pool_features(model, x, cfg.est_source)
            if storage is None:
                channel_index = select_channels(feats.shape[-1], cfg.reduce_dims, cfg.dims_seed)
                c = feats.shape[-1] if channel_index is None else len(channel_index)
                shape = (n, feats.shape[1], feats.shape[2], c)
                nbytes = int(np.prod(shape)) * 4
                if nbytes > IN_MEMORY_LIMIT:
                    tmp = tempfile.NamedTemporaryFile(suffix=".f32", delete=False)
                    storage = np.memmap(tmp.name, dtype=np.float32, mode="w+", shape=shape)
                else:
                    storage = np.empty(shape, dtype=np.float32)
            arr = feats.numpy()
            if channel_index is not None:
                arr = arr[..., channel_index]
            storage[start_idx:start_idx + len(batch)] = arr
    _, h, w, c = storage.shape
    # Full-size grids (56x56x448) only fit in memory at 32-bit.
    out_dtype = np.float32 if h * w * c * c * 8 > IN_MEMORY_LIMIT else np.float64
    try:
        grid = fit_gaussian_grid(storage, cfg.epsilon, out_dtype=out_dtype)
    finally:
        if tmp is not None:
            del storage
            Path(tmp.name).unlink(missing_ok=True)
    grid.channel_index = channel_index
    seconds = time.perf_counter() - start
    grid.meta.update({
        "stn_mode": model.cfg.stn_mode,
        "stn_chain": model.cfg.stn_chain,
        "side": str(side),
        "est_source": cfg.est_source,
        "epsilon": repr(cfg.epsilon),
        "N": str(n),
        "k": str(support.k),
        "category": support.category,
        "seed": str(support.seed),
        "reduce_dims": str(cfg.reduce_dims),
        "ckpt_sha256": ckpt_sha256,
        "adaptation_seconds": f"{seconds:.3f}",
    })
    log.info("estimated %s grid from %d pooled images in %.2fs",
             grid.meta["feature_shape"], n, seconds)
    return grid


# -- archive ---------------------------------------------------------------

def save_grid(grid: GaussianGrid, path: Path) -> Path:
    """Write ``mean``, ``cov_cholesky`` (float32) and text metadata to one file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = dict(grid.meta)
    meta.update({"epsilon": repr(grid.epsilon), "N": str(grid.n)})
    text = "\n".join(f"{k}={v}" for k, v in meta.items())
    arrays = {
        "mean": grid.mean.astype(np.float32),
        "cov_cholesky": grid.cov_cholesky.astype(np.float32),
        "meta": np.array(text),
    }
    if grid.channel_index is not None:
        arrays["channel_index"] = np.asarray(grid.channel_index, dtype=np.int64)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_grid(path: Path) -> GaussianGrid:
    with np.load(Path(path), allow_pickle=False) as data:
        meta = {}
        for line in str(data["meta"]).splitlines():
            if "=" in line:
                k, v = line.split("=", 1)
                meta[k] = v
        channel_index = data["channel_index"] if "channel_index" in data.files else None
        return GaussianGrid(data["mean"], data["cov_cholesky"], float(meta["epsilon"]),
                            int(meta["N"]), channel_index, meta)
