import numpy as np
import pytest

from cpseg.data import new_image, new_labels
from cpseg.errors import DegenerateStdWarning, InterpolationOnLabels
from cpseg.fingerprint import Fingerprint
from cpseg.preprocess import (
    AugmentConfig,
    ORDER_LINEAR,
    ORDER_NEAREST,
    Patch,
    augment,
    normalize,
    pad_to_shape,
    resample,
    resample_to_dims,
    sample_patch,
)


def _fp(mean=0.0, std=1.0, p_low=-1e9, p_high=1e9):
    return Fingerprint(mean, std, p_low, p_high, (1.0, 1.0, 1.0), 1, 1)


def test_resample_identity():
    rng = np.random.default_rng(0)
    v = new_image(rng.normal(size=(4, 5, 6)), (1.0, 1.5, 2.0))
    out = resample(v, v.spacing, ORDER_LINEAR)
    assert out.dims == v.dims
    assert np.array_equal(out.values, v.values)


def test_resample_dims_rule():
    v = new_image(np.zeros((4, 4, 4)), (2.0, 2.0, 2.0))
    out = resample(v, (1.0, 1.0, 1.0), ORDER_LINEAR)
    assert out.dims == (8, 8, 8)
    assert out.spacing == (1.0, 1.0, 1.0)


def test_resample_min_dim_is_one():
    v = new_image(np.zeros((2, 8, 8)), (1.0, 1.0, 1.0))
    out = resample(v, (10.0, 1.0, 1.0), ORDER_LINEAR)
    assert out.dims[0] == 1


def test_resample_labels_preserves_value_set():
    rng = np.random.default_rng(1)
    vals = rng.choice([0, 2, 5], size=(6, 7, 8)).astype(np.uint8)
    v = new_labels(vals, (1.0, 1.0, 1.0))
    for target in [(0.7, 0.9, 1.3), (2.0, 2.0, 2.0), (0.5, 0.5, 0.5)]:
        out = resample(v, target, ORDER_NEAREST)
        assert set(np.unique(out.values)) <= {0, 2, 5}


def test_resample_labels_linear_rejected():
    v = new_labels(np.zeros((2, 2, 2), np.uint8), (1, 1, 1))
    with pytest.raises(InterpolationOnLabels):
        resample(v, (2.0, 2.0, 2.0), ORDER_LINEAR)
    with pytest.raises(InterpolationOnLabels):
        resample_to_dims(v, (1, 1, 1), (2.0, 2.0, 2.0), ORDER_LINEAR)


def test_resample_to_dims_restores_geometry():
    rng = np.random.default_rng(2)
    v = new_labels(rng.integers(0, 3, size=(5, 6, 7)).astype(np.uint8), (1.3, 0.8, 1.1))
    small = resample(v, (2.0, 2.0, 2.0), ORDER_NEAREST)
    back = resample_to_dims(small, v.dims, v.spacing, ORDER_NEAREST)
    assert back.dims == v.dims
    assert back.spacing == v.spacing


def test_normalize_values():
    fp = Fingerprint(100.0, 50.0, 0.0, 200.0, (1, 1, 1), 1, 1)
    v = new_image(np.array([[[100.0, 150.0, 1200.0, 200.0]]]), (1, 1, 1))
    out = normalize(v, fp)
    assert out.values[0, 0, 0] == 0.0
    assert out.values[0, 0, 1] == 1.0
    # clipping: values above p_high behave exactly like p_high
    assert out.values[0, 0, 2] == out.values[0, 0, 3] == 2.0


def test_normalize_degenerate_std_warns_and_uses_one():
    fp = Fingerprint(5.0, 0.0, 5.0, 5.0, (1, 1, 1), 1, 1)
    v = new_image(np.full((2, 2, 2), 7.0), (1, 1, 1))
    with pytest.warns(DegenerateStdWarning):
        out = normalize(v, fp)
    assert np.all(out.values == 0.0)  # clipped to p_high=5, minus mean 5, over 1


def test_normalize_monotone_and_bounded():
    rng = np.random.default_rng(3)
    fp = Fingerprint(0.0, 2.0, -3.0, 3.0, (1, 1, 1), 1, 1)
    vals = np.sort(rng.normal(scale=5, size=64)).astype(np.float32)
    out = normalize(new_image(vals.reshape(4, 4, 4), (1, 1, 1)), fp).values.reshape(-1)
    assert np.all(np.diff(out) >= 0)
    assert out.min() >= (fp.p_low - fp.mean) / fp.std
    assert out.max() <= (fp.p_high - fp.mean) / fp.std


def test_sample_patch_whole_volume():
    rng = np.random.default_rng(4)
    img = new_image(rng.normal(size=(8, 8, 8)), (1, 1, 1))
    for seed in range(3):
        p = sample_patch(img, None, (8, 8, 8), np.random.default_rng(seed), 0.0)
        assert np.array_equal(p.image, img.values)
        assert p.corner == (0, 0, 0)


def test_sample_patch_oversample_foreground():
    img = new_image(np.zeros((16, 16, 16)), (1, 1, 1))
    lab = np.zeros((16, 16, 16), np.uint8)
    lab[2, 3, 4] = 1
    labels = new_labels(lab, (1, 1, 1))
    for seed in range(10):
        p = sample_patch(img, labels, (8, 8, 8), np.random.default_rng(seed), oversample_foreground=1.0)
        assert (p.labels > 0).any()


def test_sample_patch_deterministic():
    rng_img = np.random.default_rng(5)
    img = new_image(rng_img.normal(size=(12, 12, 12)), (1, 1, 1))
    a = sample_patch(img, None, (8, 8, 8), np.random.default_rng(9), 0.0)
    b = sample_patch(img, None, (8, 8, 8), np.random.default_rng(9), 0.0)
    assert np.array_equal(a.image, b.image)
    assert a.corner == b.corner


def test_sample_patch_pads_small_volumes():
    img = new_image(np.ones((2, 2, 2)), (1, 1, 1))
    lab = new_labels(np.ones((2, 2, 2), np.uint8), (1, 1, 1))
    p = sample_patch(img, lab, (6, 6, 6), np.random.default_rng(0), 0.0)
    assert p.image.shape == (6, 6, 6)
    assert p.labels.shape == (6, 6, 6)
    # symmetric padding: content sits at [2:4] on each axis
    assert np.all(p.image[2:4, 2:4, 2:4] == 1.0)
    assert p.image.sum() == 8.0
    assert np.all(p.labels[2:4, 2:4, 2:4] == 1)
    assert p.labels.sum() == 8  # padded with class 0


def test_pad_to_shape_noop():
    arr = np.ones((4, 4, 4), np.float32)
    padded, lo = pad_to_shape(arr, (4, 4, 4), 0.0)
    assert padded.shape == (4, 4, 4)
    assert lo == (0, 0, 0)


def _patch(seed=0, with_labels=True):
    rng = np.random.default_rng(seed)
    img = rng.normal(size=(6, 6, 6)).astype(np.float32)
    lbl = rng.integers(0, 3, size=(6, 6, 6)).astype(np.uint8) if with_labels else None
    return Patch(image=img, labels=lbl)


def test_augment_noop_config():
    p = _patch()
    cfg = AugmentConfig(mirror_prob=0.0, scale_prob=0.0, noise_prob=0.0)
    out = augment(p, np.random.default_rng(0), cfg)
    assert np.array_equal(out.image, p.image)
    assert np.array_equal(out.labels, p.labels)


def test_mirror_twice_is_identity():
    p = _patch()
    cfg = AugmentConfig(mirror_prob=1.0, scale_prob=0.0, noise_prob=0.0)
    once = augment(p, np.random.default_rng(0), cfg)
    twice = augment(once, np.random.default_rng(1), cfg)
    assert np.array_equal(twice.image, p.image)
    assert np.array_equal(twice.labels, p.labels)


def test_augment_preserves_label_value_set_and_shape():
    rng = np.random.default_rng(6)
    for seed in range(8):
        p = _patch(seed)
        out = augment(p, np.random.default_rng(seed), AugmentConfig())
        assert out.image.shape == p.image.shape
        assert set(np.unique(out.labels)) == set(np.unique(p.labels))


def test_augment_intensity_ops_leave_labels_alone():
    p = _patch()
    cfg = AugmentConfig(mirror_prob=0.0, scale_prob=1.0, noise_prob=1.0)
    out = augment(p, np.random.default_rng(0), cfg)
    assert np.array_equal(out.labels, p.labels)
    assert not np.array_equal(out.image, p.image)


def test_augment_deterministic_in_seed():
    p = _patch()
    a = augment(p, np.random.default_rng(42), AugmentConfig())
    b = augment(p, np.random.default_rng(42), AugmentConfig())
    assert np.array_equal(a.image, b.image)
    assert np.array_equal(a.labels, b.labels)
