import math

import numpy as np
import pytest

from oaknee.errors import InvalidResample, RoiOutOfBounds
from oaknee.imaging import (RasterImage, augment, crop_offset, extract_medial_roi, medial_roi_spec,
                            normalize_intensity, prepare_patch, resample, rotate_image)

from conftest import flat_knee


def img(pixels, spacing=0.2):
    return RasterImage(np.asarray(pixels), spacing)


# normalize_intensity


def test_normalize_constant_image():
    out = normalize_intensity(img(np.full((8, 8), 1234, dtype=np.uint16)))
    assert out.pixels.dtype == np.uint8 and not out.pixels.any()


def test_normalize_two_levels():
    x = np.zeros((8, 8), dtype=np.uint16)
    x[4:] = 65535
    out = normalize_intensity(img(x)).pixels
    assert set(np.unique(out)) == {0, 255}
    assert np.all(out[:4] == 0) and np.all(out[4:] == 255)


def test_normalize_ramp_against_sort_oracle():
    x = np.arange(100, dtype=np.uint16).reshape(10, 10)
    z = (x - x.mean()) / x.std()
    s = sorted(z.ravel().tolist())
    lo = s[math.ceil(5 / 100 * 100) - 1]
    hi = s[math.ceil(99 / 100 * 100) - 1]
    expected = np.floor((np.clip(z, lo, hi) - lo) / (hi - lo) * 255 + 0.5).astype(np.uint8)
    out = normalize_intensity(img(x)).pixels
    assert np.array_equal(out, expected)
    # values below 5 and above 99 clamp to the range ends
    assert np.all(out.ravel()[:5] == 0) and out.ravel()[-1] == 255


def test_normalize_range_hits_both_ends():
    rng = np.random.default_rng(0)
    out = normalize_intensity(img(rng.integers(0, 65536, (32, 40)).astype(np.uint16))).pixels
    assert out.min() == 0 and out.max() == 255


# resample


def test_resample_identity():
    x = np.random.default_rng(1).random((9, 7))
    out = resample(img(x, 0.2), 0.2)
    assert np.array_equal(out.pixels, x) and out.spacing == 0.2


def test_resample_doubles_dims():
    out = resample(img(np.ones((10, 6)), 0.4), 0.2)
    assert out.pixels.shape == (20, 12) and out.spacing == 0.2
    assert np.all(out.pixels == 1.0)


def test_resample_ramp_closed_form():
    w = 20
    ramp = np.tile(np.arange(w, dtype=float) * 3.0, (5, 1))
    out = resample(img(ramp, 0.4), 0.2).pixels
    # output pixel j sits at source column (j + 0.5) / 2 - 0.5, clamped to the grid
    src = np.clip((np.arange(2 * w) + 0.5) / 2 - 0.5, 0, w - 1)
    assert np.max(np.abs(out - 3.0 * src[None, :])) < 1e-6
    assert abs(out.mean() - ramp.mean()) / ramp.mean() < 0.01


def test_resample_empty_output():
    with pytest.raises(InvalidResample):
        resample(img(np.ones((2, 2)), 0.01), 1.0)
    with pytest.raises(InvalidResample):
        resample(img(np.ones((2, 2))), 0.0)


# rotate_image


def test_rotate_zero_identity():
    x = np.random.default_rng(2).random((11, 13))
    assert np.array_equal(rotate_image(img(x), 0.0, (6, 5)).pixels, x)


def test_rotate_cross_quarter_turn():
    x = np.zeros((21, 21))
    x[10, :] = 1
    x[:, 10] = 1
    out = rotate_image(img(x), math.pi / 2, (10, 10)).pixels
    assert np.max(np.abs(out - x)) < 1e-6


def test_rotate_roundtrip():
    rng = np.random.default_rng(3)
    yy, xx = np.mgrid[0:64, 0:64]
    x = 128 + 60 * np.sin(xx / 5.0) * np.cos(yy / 7.0) + rng.normal(0, 0.5, (64, 64))
    there = rotate_image(img(x), 0.3, (32, 32))
    back = rotate_image(there, -0.3, (32, 32)).pixels
    inner = (slice(20, 44), slice(20, 44))
    assert np.max(np.abs(back[inner] - x[inner])) / 255 < 2 / 255


def test_rotate_angle_bound():
    with pytest.raises(ValueError):
        rotate_image(img(np.ones((4, 4))), 4.0, (1, 1))


# ROI


def _knee_image(shift=(0.0, 0.0), size=500):
    lm = flat_knee(width=70.0, gap=5.0)
    pts = lm.points + np.array([10.0, 60.0]) + np.asarray(shift)
    return RasterImage(np.zeros((size, size), dtype=np.uint8), 0.2), lm.with_points(pts)


def test_roi_side_from_width():
    image, lm = _knee_image()
    patch, spec = extract_medial_roi(image, lm)
    assert spec.side == 50 and patch.pixels.shape == (50, 50)


def test_roi_top_on_tibia_contour():
    image, lm = _knee_image()
    _, spec = extract_medial_roi(image, lm)
    row0 = spec.bounds[0]
    # the tibia contour sits at y = 60 mm, i.e. pixel row 299.5 -> row 300
    assert abs(row0 - 60.0 / 0.2) <= 1


def test_roi_translation_invariant_side():
    a = medial_roi_spec(_knee_image()[1], 0.2)
    b = medial_roi_spec(_knee_image(shift=(3.3, -7.1))[1], 0.2)
    assert a.side == b.side
    assert b.center_x - a.center_x == pytest.approx(3.3 / 0.2, abs=1)


def test_roi_out_of_bounds():
    image, lm = _knee_image(size=320)
    with pytest.raises(RoiOutOfBounds):
        extract_medial_roi(image, lm.with_points(lm.points + [0, 5.0]))


# prepare_patch / augment


def test_prepare_patch_eval_center():
    assert crop_offset("eval") == (4, 4)
    x = np.random.default_rng(4).integers(0, 256, (50, 50)).astype(np.uint8)
    a = prepare_patch(img(x), "eval")
    assert a.shape == (48, 48) and 0 <= a.min() and a.max() <= 1
    assert np.array_equal(a, prepare_patch(img(x), "eval"))


def test_prepare_patch_train_deterministic():
    x = np.random.default_rng(5).integers(0, 256, (40, 40)).astype(np.uint8)
    assert np.array_equal(prepare_patch(img(x), "train", 9), prepare_patch(img(x), "train", 9))


def test_crop_offset_uniform():
    rng = np.random.default_rng(6)
    draws = np.array([crop_offset("train", rng) for _ in range(10000)])
    for axis in range(2):
        freq = np.bincount(draws[:, axis], minlength=9) / len(draws)
        assert freq.shape == (9,)
        assert np.all(np.abs(freq - 1 / 9) < 0.02)


def test_prepare_patch_rejects_non_square():
    with pytest.raises(ValueError):
        prepare_patch(img(np.zeros((10, 12), dtype=np.uint8)))


def test_augment_identity():
    x = np.random.default_rng(7).random((48, 48))
    assert np.array_equal(augment(x, 0), x)


def test_augment_brightness_clamp():
    out = augment(np.full((4, 4), 0.95), 0, brightness_range=(0.1, 0.1))
    assert np.all(out == 1.0)


def test_augment_gamma():
    out = augment(np.full((4, 4), 0.5), 0, gamma_range=(2.0, 2.0))
    assert np.allclose(out, 0.25, atol=0, rtol=1e-15)
