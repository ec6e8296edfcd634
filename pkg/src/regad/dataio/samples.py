"""Image samples and MVTec-style dataset ingestion.

Directory layout shared by MVTec AD, MPDD and the synthetic generator::

    <root>/<category>/train/good/*.png
    <root>/<category>/test/<defect_type>/*.png
    <root>/<category>/ground_truth/<defect_type>/<stem>_mask.png
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
DATASET_KINDS = ("mvtec", "mpdd", "synthetic")


class DatasetError(Exception):
    """Raised for malformed dataset trees, splits and support requests."""


def read_rgb(path: Path) -> np.ndarray:
    """Read an image file as an H x W x 3 float32 array in [0, 1]."""
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float32)
    except (OSError, UnidentifiedImageError) as exc:
        raise DatasetError(f"unreadable image: {path}") from exc
    return arr / 255.0


def read_mask(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("L"))
    except (OSError, UnidentifiedImageError) as exc:
        raise DatasetError(f"unreadable mask: {path}") from exc
    return (arr > 0).astype(np.uint8)


@dataclass
class ImageSample:
    """One image plus its labels.

    Pixels and mask are either held in memory or read lazily from
    ``source_path`` / ``mask_path``; on-disk datasets are far too large to
    keep resident.
    """

    category: str
    split: str
    label: str
    source_path: str = ""
    mask_path: Optional[str] = None
    defect_type: str = "good"
    aug: Tuple[str, ...] = ()
    _pixels: Optional[np.ndarray] = field(default=None, repr=False)
    _mask: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.split not in ("train", "test"):
            raise ValueError(f"bad split {self.split!r}")
        if self.label not in ("normal", "anomalous"):
            raise ValueError(f"bad label {self.label!r}")
        if self.split == "train" and self.label != "normal":
            raise ValueError("training samples must be normal")
        has_mask = self._mask is not None or self.mask_path is not None
        if has_mask and self.label != "anomalous":
            raise ValueError("only anomalous samples carry a mask")

    @property
    def pixels(self) -> np.ndarray:
        if self._pixels is not None:
            return self._pixels
        return read_rgb(Path(self.source_path))

    @property
    def mask(self) -> Optional[np.ndarray]:
        if self._mask is not None:
            return self._mask
        if self.mask_path is not None:
            return read_mask(Path(self.mask_path))
        return None

    @property
    def is_anomalous(self) -> bool:
        return self.label == "anomalous"

    def with_data(self, pixels: np.ndarray, mask: Optional[np.ndarray] = None,
                  aug: Optional[Tuple[str, ...]] = None) -> "ImageSample":
        """Copy of this sample holding the given arrays in memory."""
        return replace(
            self,
            _pixels=pixels,
            _mask=mask,
            mask_path=None,
            aug=self.aug if aug is None else aug,
        )


def parse_sample_path(path: str) -> Tuple[str, str, str]:
    """Recover ``(category, split, label)`` from a dataset-relative path."""
    parts = Path(path).parts
    if len(parts) < 4 or parts[-3] not in ("train", "test"):
        raise DatasetError(f"path does not follow the dataset layout: {path}")
    category, split, defect = parts[-4], parts[-3], parts[-2]
    label = "normal" if defect == "good" else "anomalous"
    return category, split, label


def _image_files(directory: Path) -> List[Path]:
    return sorted(p for p in directory.iterdir()
                  if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def _check_header(path: Path) -> None:
    try:
        with Image.open(path) as img:
            img.size
    except (OSError, UnidentifiedImageError) as exc:
        raise DatasetError(f"unreadable image: {path}") from exc


def _find_mask(gt_dir: Path, image: Path) -> Path:
    for suffix in (".png", image.suffix):
        for name in (f"{image.stem}_mask{suffix}", f"{image.stem}{suffix}"):
            candidate = gt_dir / name
            if candidate.is_file():
                return candidate
    raise DatasetError(f"missing mask for anomalous image: {image}")


def load_dataset(root, dataset_kind: str = "mvtec") -> List[ImageSample]:
    """Index every image of an MVTec-layout tree.

    Pixels are not decoded here, only the headers are checked. The result is
    ordered lexicographically by path.
    """
    if dataset_kind not in DATASET_KINDS:
        raise DatasetError(f"unknown dataset kind {dataset_kind!r}")
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root not found: {root}")

    samples: List[ImageSample] = []
    categories = sorted(p for p in root.iterdir()
                        if p.is_dir() and (p / "train").is_dir())
    if not categories:
        raise DatasetError(f"no categories under {root}")
    for cat_dir in categories:
        category = cat_dir.name
        cat_samples: List[ImageSample] = []
        train_dir = cat_dir / "train" / "good"
        if train_dir.is_dir():
            for path in _image_files(train_dir):
                _check_header(path)
                cat_samples.append(ImageSample(category, "train", "normal", str(path)))
        test_root = cat_dir / "test"
        n_test = 0
        if test_root.is_dir():
            for defect_dir in sorted(p for p in test_root.iterdir() if p.is_dir()):
                defect = defect_dir.name
                for path in _image_files(defect_dir):
                    _check_header(path)
                    n_test += 1
                    if defect == "good":
                        cat_samples.append(ImageSample(category, "test", "normal", str(path)))
                    else:
                        mask = _find_mask(cat_dir / "ground_truth" / defect, path)
                        cat_samples.append(ImageSample(
                            category, "test", "anomalous", str(path),
                            mask_path=str(mask), defect_type=defect))
        n_train = len(cat_samples) - n_test
        if n_train == 0 or n_test == 0:
            raise DatasetError(f"empty category: {category} "
                               f"({n_train} train / {n_test} test images)")
        samples.extend(cat_samples)
    samples.sort(key=lambda s: s.source_path)
    return samples


def categories_of(samples: Sequence[ImageSample]) -> List[str]:
    return sorted({s.category for s in samples})


def make_loo_split(samples: Sequence[ImageSample], target: str):
    """Leave-one-out split: train on every other category, test on ``target``."""
    if not any(s.category == target for s in samples):
        raise DatasetError(f"target category {target!r} not in dataset")
    train_pool = [s for s in samples
                  if s.category != target and s.split == "train" and s.label == "normal"]
    test_pool = [s for s in samples if s.category == target and s.split == "test"]
    if not train_pool:
        warnings.warn(f"leave-one-out split for {target!r} has an empty training pool",
                      stacklevel=2)
    return train_pool, test_pool


@dataclass
class SupportSet:
    category: str
    k: int
    samples: List[ImageSample]
    seed: int

    def __post_init__(self) -> None:
        if self.k <= 0 or len(self.samples) != self.k:
            raise ValueError("support set must hold exactly k > 0 samples")
        for s in self.samples:
            if s.label != "normal" or s.category != self.category:
                raise ValueError("support samples must be normal images of the category")


def sample_support(samples: Sequence[ImageSample], category: str, k: int,
                   seed: int) -> SupportSet:
    """Draw ``k`` normal training images of ``category`` without replacement."""
    candidates = [s for s in samples
                  if s.category == category and s.split == "train" and s.label == "normal"]
    if k <= 0:
        raise DatasetError("k must be positive")
    if len(candidates) < k:
        raise DatasetError(f"category {category!r} has {len(candidates)} normal "
                           f"training images, fewer than k={k}")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(candidates), size=k, replace=False)
    return SupportSet(category, k, [candidates[i] for i in idx], seed)
