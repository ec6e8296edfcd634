import itertools
import shutil
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from regad.dataio import (
    AugmentationConfig,
    DatasetError,
    ImageSample,
    SupportSet,
    build_support_pool,
    generate_synthetic,
    load_dataset,
    make_loo_split,
    parse_sample_path,
    preprocess,
    sample_support,
)
from regad.dataio.preprocess import IMAGENET_MEAN, IMAGENET_STD

MVTEC_CATEGORIES = ["bottle", "cable", "capsule", "carpet", "grid", "hazelnut", "leather",
                    "metal_nut", "pill", "screw", "tile", "toothbrush", "transistor",
                    "wood", "zipper"]
MPDD_CATEGORIES = ["bracket_black", "bracket_brown", "bracket_white", "connector",
                   "metal_plate", "tubes"]


def _png(path, arr):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def _fake_tree(root, categories, size=8):
    img = np.full((size, size, 3), 128, np.uint8)
    mask = np.zeros((size, size), np.uint8)
    mask[2:4, 2:4] = 255
    for cat in categories:
        for i in range(2):
            _png(root / cat / "train" / "good" / f"{i:03d}.png", img)
        _png(root / cat / "test" / "good" / "000.png", img)
        _png(root / cat / "test" / "crack" / "000.png", img)
        _png(root / cat / "ground_truth" / "crack" / "000_mask.png", mask)
    return root


def _sample(pixels, category="c", split="train", label="normal", mask=None):
    return ImageSample(category, split, label).with_data(np.asarray(pixels, np.float32), mask)


class TestLoadDataset:
    def test_mvtec_layout_discovers_15_categories(self, tmp_path):
        samples = load_dataset(_fake_tree(tmp_path, MVTEC_CATEGORIES), "mvtec")
        assert len({s.category for s in samples}) == 15

    def test_mpdd_layout_discovers_6_categories(self, tmp_path):
        samples = load_dataset(_fake_tree(tmp_path, MPDD_CATEGORIES), "mpdd")
        assert len({s.category for s in samples}) == 6

    def test_labels_masks_and_order(self, synth_samples):
        paths = [s.source_path for s in synth_samples]
        assert paths == sorted(paths)
        for s in synth_samples:
            if s.split == "train":
                assert s.label == "normal" and s.mask is None
            elif s.defect_type == "good":
                assert s.label == "normal" and s.mask is None
            else:
                assert s.label == "anomalous"
                assert s.mask.shape == s.pixels.shape[:2]
                assert s.mask.any()
            assert 0.0 <= s.pixels.min() and s.pixels.max() <= 1.0

    def test_labels_recomputable_from_path(self, synth_samples):
        for s in synth_samples:
            assert parse_sample_path(s.source_path) == (s.category, s.split, s.label)

    def test_empty_category(self, tmp_path):
        generate_synthetic(tmp_path, categories=2, train_per_cat=2, test_per_cat=2, size=16)
        shutil.rmtree(tmp_path / "synth_01" / "test")
        with pytest.raises(DatasetError, match="empty category"):
            load_dataset(tmp_path, "synthetic")

    def test_missing_mask_names_path(self, tmp_path):
        _fake_tree(tmp_path, ["a"])
        (tmp_path / "a" / "ground_truth" / "crack" / "000_mask.png").unlink()
        with pytest.raises(DatasetError, match=r"crack.000\.png"):
            load_dataset(tmp_path, "mvtec")

    def test_unreadable_image_names_path(self, tmp_path):
        _fake_tree(tmp_path, ["a"])
        bad = tmp_path / "a" / "train" / "good" / "999.png"
        bad.write_bytes(b"not a png")
        with pytest.raises(DatasetError, match="999.png"):
            load_dataset(tmp_path, "mvtec")

    def test_missing_root(self, tmp_path):
        with pytest.raises(DatasetError):
            load_dataset(tmp_path / "nope")


class TestSplits:
    def test_loo_mvtec_train_spans_14(self, tmp_path):
        samples = load_dataset(_fake_tree(tmp_path, MVTEC_CATEGORIES), "mvtec")
        train_pool, test_pool = make_loo_split(samples, "bottle")
        assert len({s.category for s in train_pool}) == 14
        assert all(s.split == "train" and s.label == "normal" for s in train_pool)
        assert {s.category for s in test_pool} == {"bottle"}
        assert all(s.split == "test" for s in test_pool)

    def test_single_category_warns(self, tmp_path):
        samples = load_dataset(_fake_tree(tmp_path, ["only"]), "mvtec")
        with pytest.warns(UserWarning, match="empty training pool"):
            train_pool, test_pool = make_loo_split(samples, "only")
        assert train_pool == [] and len(test_pool) == 2

    def test_unknown_target(self, synth_samples):
        with pytest.raises(DatasetError):
            make_loo_split(synth_samples, "nonexistent")


class TestSupport:
    def test_deterministic(self, synth_samples):
        a = sample_support(synth_samples, "synth_00", 2, seed=0)
        b = sample_support(synth_samples, "synth_00", 2, seed=0)
        assert [s.source_path for s in a.samples] == [s.source_path for s in b.samples]

    def test_too_few_candidates(self, synth_samples):
        with pytest.raises(DatasetError, match="fewer than k=8"):
            sample_support(synth_samples, "synth_00", 8, seed=0)

    def test_ten_seeds(self, synth_samples):
        supports = [sample_support(synth_samples, "synth_01", 2, seed=s) for s in range(10)]
        assert len(supports) == 10
        for sup in supports:
            assert sup.k == 2 and len({s.source_path for s in sup.samples}) == 2
            assert all(s.category == "synth_01" and s.split == "train" for s in sup.samples)
        assert len({tuple(s.source_path for s in sup.samples) for sup in supports}) > 1

    def test_uniform_without_replacement(self, synth_samples):
        counts = {}
        for seed in range(3000):
            for s in sample_support(synth_samples, "synth_00", 2, seed).samples:
                counts[s.source_path] = counts.get(s.source_path, 0) + 1
        # 6 candidates, each drawn with probability 2/6 per support.
        expected = 3000 * 2 / 6
        sigma = np.sqrt(3000 * (1 / 3) * (2 / 3))
        assert len(counts) == 6
        assert all(abs(c - expected) < 5 * sigma for c in counts.values())


class TestPreprocess:
    def test_resize_1024(self):
        s = _sample(np.random.default_rng(0).random((1024, 1024, 3)))
        out = preprocess(s, 224)
        assert out.pixels.shape == (224, 224, 3)

    def test_identity_without_standardization(self):
        px = np.random.default_rng(0).random((224, 224, 3)).astype(np.float32)
        out = preprocess(_sample(px), 224, standardize_pixels=False)
        np.testing.assert_array_equal(out.pixels, px)

    def test_standardization_constants(self):
        px = np.full((4, 4, 3), 0.5, np.float32)
        out = preprocess(_sample(px), 4)
        expected = (0.5 - np.array(IMAGENET_MEAN)) / np.array(IMAGENET_STD)
        np.testing.assert_allclose(out.pixels[0, 0], expected, rtol=1e-6)

    def test_mask_binarized_and_aligned(self):
        mask = np.zeros((100, 100), np.uint8)
        mask[10:40, 50:90] = 255
        s = _sample(np.zeros((100, 100, 3)), split="test", label="anomalous", mask=mask)
        out = preprocess(s, 56)
        assert set(np.unique(out.mask)) == {0, 1}
        assert out.mask.shape == out.pixels.shape[:2]

    def test_gray_input_converted(self):
        out = preprocess(_sample(np.full((8, 8), 0.3)), 8, standardize_pixels=False)
        assert out.pixels.shape == (8, 8, 3)

    def test_zero_area(self):
        with pytest.raises(ValueError):
            preprocess(_sample(np.zeros((0, 5, 3))), 8)


def _color_support(k=2, side=24):
    rng = np.random.default_rng(7)
    samples = []
    for _ in range(k):
        px = rng.random((side, side, 3)).astype(np.float32)
        samples.append(ImageSample("c", "train", "normal").with_data(px))
    return SupportSet("c", k, samples, seed=0)


def _enumerated_size(cfg, k):
    """Brute-force count of the family product."""
    families = [
        ["skip"] + (["on"] if cfg.enable_gray else []),
        ["skip"] + (list(cfg.flip_axes) if cfg.enable_flip else []),
        ["skip"] + (list(cfg.rotation_angles) if cfg.enable_rotate else []),
        ["skip"] + (list(cfg.translation_offsets) if cfg.enable_translate else []),
    ]
    return k * sum(1 for _ in itertools.product(*families))


class TestSupportPool:
    def test_identity_config(self):
        sup = _color_support()
        pool = build_support_pool(sup, AugmentationConfig.identity())
        assert len(pool) == 2
        for src, out in zip(sup.samples, pool):
            np.testing.assert_array_equal(src.pixels, out.pixels)
            assert out.aug == ()

    def test_example_size_48(self):
        cfg = AugmentationConfig(rotation_angles=[15, -15], translation_offsets=[(0.1, 0.0)],
                                 flip_axes=["horizontal"])
        pool = build_support_pool(_color_support(), cfg)
        assert len(pool) == 48 == _enumerated_size(cfg, 2)
        assert len({p.aug for p in pool}) == 24

    @pytest.mark.parametrize("family", ["gray", "flip", "rotate", "translate"])
    def test_each_family_changes_pixels(self, family):
        cfg = AugmentationConfig.identity()
        setattr(cfg, f"enable_{family}", True)
        sup = _color_support(k=1)
        pool = build_support_pool(sup, cfg)
        base = sup.samples[0].pixels
        assert any(not np.array_equal(p.pixels, base) for p in pool[1:])

    def test_deterministic_order(self):
        cfg = AugmentationConfig(rotation_angles=[30], translation_offsets=[(0.0, 0.1)])
        a = build_support_pool(_color_support(), cfg)
        b = build_support_pool(_color_support(), cfg)
        assert [p.aug for p in a] == [p.aug for p in b]
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.pixels, y.pixels)

    @settings(max_examples=25, deadline=None)
    @given(gray=st.booleans(), flip=st.booleans(), rot=st.booleans(), shift=st.booleans(),
           n_angles=st.integers(1, 4), n_offsets=st.integers(1, 3), n_axes=st.integers(1, 2),
           k=st.integers(1, 3))
    def test_pool_size_law(self, gray, flip, rot, shift, n_angles, n_offsets, n_axes, k):
        cfg = AugmentationConfig(
            enable_gray=gray, enable_flip=flip, enable_rotate=rot, enable_translate=shift,
            rotation_angles=[10.0 * (i + 1) for i in range(n_angles)],
            translation_offsets=[(0.05 * (i + 1), 0.0) for i in range(n_offsets)],
            flip_axes=["horizontal", "vertical"][:n_axes])
        law = k * (1 + gray) * (1 + n_axes * flip) * (1 + n_angles * rot) * (1 + n_offsets * shift)
        assert len(cfg.combinations()) * k == law == _enumerated_size(cfg, k)

    def test_augmentations_stay_in_range(self):
        pool = build_support_pool(_color_support(k=1), AugmentationConfig())
        assert len(pool) == 270
        for p in pool:
            assert p.pixels.shape == (24, 24, 3)
            assert p.pixels.min() >= -1e-6 and p.pixels.max() <= 1 + 1e-6


class TestSynthetic:
    def test_generator_counts(self, tmp_path):
        names = generate_synthetic(tmp_path, categories=2, train_per_cat=3, test_per_cat=4,
                                   size=32, seed=5)
        samples = load_dataset(tmp_path, "synthetic")
        assert len(names) == 2
        for name in names:
            cat = [s for s in samples if s.category == name]
            assert sum(s.split == "train" for s in cat) == 3
            test = [s for s in cat if s.split == "test"]
            assert len(test) == 4 and sum(s.is_anomalous for s in test) == 2

    def test_generator_deterministic(self, tmp_path):
        generate_synthetic(tmp_path / "a", 1, 2, 2, seed=9, size=16)
        generate_synthetic(tmp_path / "b", 1, 2, 2, seed=9, size=16)
        for rel in ("synth_00/train/good/000.png", "synth_00/test/blob/000.png"):
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_image_sample_invariants():
    with pytest.raises(ValueError):
        ImageSample("c", "train", "anomalous")
    with pytest.raises(ValueError):
        ImageSample("c", "test", "normal").with_data(np.zeros((2, 2, 3)), np.ones((2, 2)))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        ImageSample("c", "test", "anomalous").with_data(np.zeros((2, 2, 3)), np.ones((2, 2)))
