"""Support-set expansion by exhaustive augmentation combinations.

Each family (gray, flip, rotate, translate) contributes "skip" plus one
choice per variant; the pool is the Cartesian product over families,
applied in the fixed order gray -> flip -> rotate -> translate.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .samples import ImageSample, SupportSet


@dataclass
class AugmentationConfig:
    enable_gray: bool = True
    enable_flip: bool = True
    enable_translate: bool = True
    enable_rotate: bool = True
    rotation_angles: List[float] = field(
        default_factory=lambda: [15.0, -15.0, 30.0, -30.0, 45.0, -45.0, 90.0, -90.0])
    translation_offsets: List[Tuple[float, float]] = field(
        default_factory=lambda: [(0.1, 0.0), (-0.1, 0.0), (0.0, 0.1), (0.0, -0.1)])
    flip_axes: List[str] = field(default_factory=lambda: ["horizontal", "vertical"])

    @classmethod
    def identity(cls) -> "AugmentationConfig":
        return cls(enable_gray=False, enable_flip=False,
                   enable_translate=False, enable_rotate=False)

    def __post_init__(self) -> None:
        for axis in self.flip_axes:
            if axis not in ("horizontal", "vertical"):
                raise ValueError(f"unknown flip axis {axis!r}")
        self.translation_offsets = [tuple(map(float, o)) for o in self.translation_offsets]
        self.rotation_angles = [float(a) for a in self.rotation_angles]

    def family_choices(self) -> List[List[Optional[Tuple[str, object]]]]:
        """Per-family option lists; ``None`` means the family is skipped."""
        gray = [None, ("gray", None)] if self.enable_gray else [None]
        flip = [None] + [("flip", a) for a in self.flip_axes] if self.enable_flip else [None]
        rot = [None] + [("rotate", a) for a in self.rotation_angles] if self.enable_rotate else [None]
        shift = ([None] + [("translate", o) for o in self.translation_offsets]
                 if self.enable_translate else [None])
        return [gray, flip, rot, shift]

    def combinations(self) -> List[Tuple[Tuple[str, object], ...]]:
        """Every augmentation chain, identity first."""
        return [tuple(op for op in combo if op is not None)
                for combo in itertools.product(*self.family_choices())]


def gray(pixels: np.ndarray) -> np.ndarray:
    m = pixels.mean(axis=2, keepdims=True)
    return np.repeat(m, pixels.shape[2], axis=2)


def flip(pixels: np.ndarray, axis: str) -> np.ndarray:
    if axis == "horizontal":
        return pixels[:, ::-1].copy()
    return pixels[::-1].copy()


def rotate(pixels: np.ndarray, degrees: float) -> np.ndarray:
    """Counter-clockwise rotation about the center, reflected borders."""
    h, w = pixels.shape[:2]
    if h == w and degrees % 90 == 0:
        return np.rot90(pixels, int(degrees // 90) % 4, axes=(0, 1)).copy()
    return ndimage.rotate(pixels, degrees, axes=(1, 0), reshape=False,
                          order=1, mode="reflect")


def translate(pixels: np.ndarray, offset: Tuple[float, float]) -> np.ndarray:
    """Shift by (dx, dy) fractions of the image side, reflected borders."""
    h, w = pixels.shape[:2]
    dx, dy = offset
    return ndimage.shift(pixels, (dy * h, dx * w, 0), order=1, mode="reflect")


def _apply(pixels: np.ndarray, op: Tuple[str, object]) -> np.ndarray:
    name, arg = op
    if name == "gray":
        return gray(pixels)
    if name == "flip":
        return flip(pixels, arg)
    if name == "rotate":
        return rotate(pixels, arg)
    return translate(pixels, arg)


def describe(chain: Sequence[Tuple[str, object]]) -> Tuple[str, ...]:
    out = []
    for name, arg in chain:
        if name == "gray":
            out.append("gray")
        elif name == "flip":
            out.append(f"flip:{arg}")
        elif name == "rotate":
            out.append(f"rotate:{arg:g}")
        else:
            out.append(f"translate:{arg[0]:g},{arg[1]:g}")
    return tuple(out)


def augment_pixels(pixels: np.ndarray, chain: Sequence[Tuple[str, object]]) -> np.ndarray:
    out = pixels
    for op in chain:
        out = _apply(out, op)
    return np.ascontiguousarray(out, dtype=np.float32)


def build_support_pool(support: SupportSet, cfg: AugmentationConfig,
                       images: Optional[Sequence[ImageSample]] = None) -> List[ImageSample]:
    """Expand the support set into ``k * len(cfg.combinations())`` samples.

    ``images`` optionally supplies already-resized versions of the support
    samples (same order); augmentation then runs at that resolution.
    Each output records its chain in ``aug``.
    """
    if not support.samples:
        raise ValueError("empty support set")
    sources = list(images) if images is not None else support.samples
    chains = cfg.combinations()
    pool = []
    for sample in sources:
        pixels = sample.pixels
        for chain in chains:
            pool.append(sample.with_data(augment_pixels(pixels, chain), None,
                                         aug=describe(chain)))
    return pool
