"""Procedural stand-in for MVTec: textured categories with blob/scratch defects.

Writes the MVTec directory layout so the regular loader ingests it.
"""

from __future__ import annotations

from pathlib import Path
from typing import Tuple

import numpy as np
from PIL import Image
from scipy import ndimage


def _category_style(rng: np.random.Generator):
    return {
        "color": rng.uniform(0.25, 0.75, size=3),
        "angle": rng.uniform(0, np.pi),
        "freq": rng.uniform(4.0, 12.0),
        "contrast": rng.uniform(0.08, 0.18),
        "grain": rng.uniform(1.0, 3.0),
    }


def _texture(style, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    phase = rng.uniform(0, 2 * np.pi)
    u = np.cos(style["angle"]) * xx + np.sin(style["angle"]) * yy
    stripes = np.sin(2 * np.pi * style["freq"] * u + phase)
    noise = ndimage.gaussian_filter(rng.standard_normal((size, size)), style["grain"])
    noise /= noise.std() + 1e-8
    base = style["contrast"] * stripes + 0.03 * noise
    img = style["color"][None, None, :] + base[:, :, None]
    return img.clip(0.0, 1.0)


def _blob_mask(size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    cy, cx = rng.uniform(0.25, 0.75, size=2) * size
    ry, rx = rng.uniform(0.05, 0.12, size=2) * size
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _scratch_mask(size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    cy, cx = rng.uniform(0.3, 0.7, size=2) * size
    theta = rng.uniform(0, np.pi)
    half_len = rng.uniform(0.15, 0.3) * size
    width = max(2.0, 0.015 * size)
    dx, dy = xx - cx, yy - cy
    along = dx * np.cos(theta) + dy * np.sin(theta)
    across = -dx * np.sin(theta) + dy * np.cos(theta)
    return (np.abs(along) <= half_len) & (np.abs(across) <= width)


def _insert_defect(img: np.ndarray, kind: str, rng: np.random.Generator):
    size = img.shape[0]
    mask = _blob_mask(size, rng) if kind == "blob" else _scratch_mask(size, rng)
    mean = img.mean(axis=(0, 1))
    # Push towards the opposite end of the intensity range.
    target = np.where(mean > 0.5, 0.05, 0.95)
    out = img.copy()
    out[mask] = 0.2 * out[mask] + 0.8 * target
    return out, mask


def _save(arr: np.ndarray, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((arr * 255).round().astype(np.uint8)).save(path)


def generate_synthetic(out: Path, categories: int = 3, train_per_cat: int = 10,
                       test_per_cat: int = 10, seed: int = 0, size: int = 224,
                       anomaly_fraction: float = 0.5) -> Tuple[str, ...]:
    """Write a synthetic dataset under ``out``; returns the category names.

    Each category gets ``test_per_cat`` test images of which
    ``anomaly_fraction`` (at least one, at most all but one) are defective.
    """
    if categories <= 0 or train_per_cat <= 0 or test_per_cat <= 0:
        raise ValueError("category and image counts must be positive")
    out = Path(out)
    rng = np.random.default_rng(seed)
    names = tuple(f"synth_{i:02d}" for i in range(categories))
    n_bad = int(round(test_per_cat * anomaly_fraction))
    n_bad = min(max(n_bad, 1), max(test_per_cat - 1, 1)) if test_per_cat > 1 else 0
    for name in names:
        style = _category_style(rng)
        for i in range(train_per_cat):
            _save(_texture(style, size, rng), out / name / "train" / "good" / f"{i:03d}.png")
        for i in range(test_per_cat - n_bad):
            _save(_texture(style, size, rng), out / name / "test" / "good" / f"{i:03d}.png")
        for i in range(n_bad):
            kind = "blob" if i % 2 == 0 else "scratch"
            img, mask = _insert_defect(_texture(style, size, rng), kind, rng)
            _save(img, out / name / "test" / kind / f"{i:03d}.png")
            _save(mask.astype(np.float64),
                  out / name / "ground_truth" / kind / f"{i:03d}_mask.png")
    return names
