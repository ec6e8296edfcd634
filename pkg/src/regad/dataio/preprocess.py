"""Resizing and backbone standardization."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .samples import ImageSample

# ImageNet statistics of the pretrained backbone.
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def to_rgb(pixels: np.ndarray) -> np.ndarray:
    """Coerce gray, gray+alpha or RGBA arrays to H x W x 3."""
    arr = np.asarray(pixels, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"expected an image array, got shape {arr.shape}")
    c = arr.shape[2]
    if c in (1, 2):
        arr = np.repeat(arr[:, :, :1], 3, axis=2)
    elif c == 4:
        arr = arr[:, :, :3]
    elif c != 3:
        raise ValueError(f"unsupported channel count {c}")
    return arr


def resize_image(pixels: np.ndarray, side: int) -> np.ndarray:
    h, w = pixels.shape[:2]
    if (h, w) == (side, side):
        return pixels
    t = torch.from_numpy(np.ascontiguousarray(pixels.transpose(2, 0, 1)))[None]
    out = F.interpolate(t, size=(side, side), mode="bilinear",
                        align_corners=False, antialias=side < min(h, w))
    return out[0].numpy().transpose(1, 2, 0).clip(0.0, 1.0)


def resize_mask(mask: np.ndarray, side: int) -> np.ndarray:
    binary = (np.asarray(mask) > 0).astype(np.uint8)
    if binary.shape == (side, side):
        return binary
    t = torch.from_numpy(binary.astype(np.float32))[None, None]
    out = F.interpolate(t, size=(side, side), mode="nearest")
    return out[0, 0].numpy().astype(np.uint8)


def standardize(pixels: np.ndarray, mean: Sequence[float] = IMAGENET_MEAN,
                std: Sequence[float] = IMAGENET_STD) -> np.ndarray:
    return ((pixels - np.asarray(mean, np.float32)) / np.asarray(std, np.float32)).astype(np.float32)


def preprocess(sample: ImageSample, side: int, standardize_pixels: bool = True,
               mean: Sequence[float] = IMAGENET_MEAN,
               std: Sequence[float] = IMAGENET_STD) -> ImageSample:
    """Resize to ``side`` x ``side`` (bilinear; nearest for the mask), then
    optionally standardize with the backbone's normalization constants.

    The returned sample holds its arrays in memory.
    """
    if side <= 0:
        raise ValueError("side must be positive")
    pixels = to_rgb(sample.pixels)
    if pixels.shape[0] == 0 or pixels.shape[1] == 0:
        raise ValueError(f"zero-area image: {sample.source_path}")
    pixels = resize_image(pixels, side)
    if standardize_pixels:
        pixels = standardize(pixels, mean, std)
    mask: Optional[np.ndarray] = sample.mask
    if mask is not None:
        mask = resize_mask(mask, side)
    return sample.with_data(pixels, mask)


def to_tensor(samples: Sequence[ImageSample]) -> torch.Tensor:
    """Stack preprocessed samples into an N x 3 x side x side batch."""
    arr = np.stack([s.pixels for s in samples]).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))
