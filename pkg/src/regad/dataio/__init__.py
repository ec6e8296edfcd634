from .augment import AugmentationConfig, build_support_pool
from .preprocess import IMAGENET_MEAN, IMAGENET_STD, preprocess, to_tensor
from .samples import (
    DatasetError,
    ImageSample,
    SupportSet,
    categories_of,
    load_dataset,
    make_loo_split,
    parse_sample_path,
    sample_support,
)
from .synth import generate_synthetic

__all__ = [
    "AugmentationConfig",
    "DatasetError",
    "IMAGENET_MEAN",
    "IMAGENET_STD",
    "ImageSample",
    "SupportSet",
    "build_support_pool",
    "categories_of",
    "generate_synthetic",
    "load_dataset",
    "make_loo_split",
    "parse_sample_path",
    "preprocess",
    "sample_support",
    "to_tensor",
]
