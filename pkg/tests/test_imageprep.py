import math

import numpy as np
import pytest

from fslkit.imageprep import (
    AugmentPolicy,
    BadGrid,
    CircleOutOfBounds,
    FovCircle,
    GrayImage,
    augment,
    crop_fov,
    load_png,
    normalize_resize,
    patch_featurize,
)


def gray(arr):
    return GrayImage.from_array(np.asarray(arr, dtype=np.float64))


# ---------------------------------------------------------------------------
# field-of-view crop


def test_crop_side_is_inscribed_square():
    img = gray(np.zeros((576, 576)))
    out = crop_fov(img, FovCircle(288.0, 288.0, 288.0))
    side = math.floor(288 * math.sqrt(2))
    assert side == 407
    assert out.pixels.shape == (side, side)


def test_crop_radius_one():
    img = gray(np.arange(9.0).reshape(3, 3) / 10.0)
    out = crop_fov(img, FovCircle(1.5, 1.5, 1.0))
    assert out.pixels.shape == (1, 1)


def test_crop_circle_touching_edge_is_valid():
    img = gray(np.zeros((10, 10)))
    crop_fov(img, FovCircle(5.0, 5.0, 5.0))  # touches all four edges
    with pytest.raises(CircleOutOfBounds):
        crop_fov(img, FovCircle(5.0, 5.0, 5.5))


def test_crop_never_reaches_outside_circle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        h, w = rng.integers(8, 40, size=2)
        r = float(rng.uniform(1.0, min(h, w) / 2))
        cx = float(rng.uniform(r, w - r))
        cy = float(rng.uniform(r, h - r))
        img = gray(rng.random((h, w)))
        out = crop_fov(img, FovCircle(cx, cy, r))
        side = out.pixels.shape[0]
        col0 = math.floor(cx - side / 2 + 0.5)
        row0 = math.floor(cy - side / 2 + 0.5)
        ys, xs = np.mgrid[row0 : row0 + side, col0 : col0 + side]
        dist = np.hypot(xs + 0.5 - cx, ys + 0.5 - cy)
        assert dist.max() <= r + 1e-9


# ---------------------------------------------------------------------------
# augmentation


def test_disabled_policy_is_identity():
    rng = np.random.default_rng(1)
    img = gray(rng.random((16, 16)))
    out = augment(img, AugmentPolicy.disabled(), seed=7)
    np.testing.assert_array_equal(out.pixels, img.pixels)


def test_flip_only_twice_is_identity():
    rng = np.random.default_rng(2)
    img = gray(rng.random((12, 10)))
    policy = AugmentPolicy(enable_flip=True)
    for seed in range(8):  # same seed draws the same flips; flips are involutions
        once = augment(img, policy, seed=seed)
        twice = augment(once, policy, seed=seed)
        np.testing.assert_array_equal(twice.pixels, img.pixels)


def test_augment_deterministic_per_seed():
    rng = np.random.default_rng(3)
    img = gray(rng.random((20, 20)))
    policy = AugmentPolicy(True, True, (0.5, 2.0), (0.0, 1.0))
    a = augment(img, policy, seed=11)
    b = augment(img, policy, seed=11)
    np.testing.assert_array_equal(a.pixels, b.pixels)
    c = augment(img, policy, seed=12)
    assert not np.array_equal(c.pixels, a.pixels)


def _reflect_index(i, n):
    # scipy 'reflect' boundary: (d c b a | a b c d | d c b a)
    period = 2 * n
    i = i % period
    if i < 0:
        i += period
    return i if i < n else period - 1 - i


def _direct_gaussian_blur(arr, sigma, truncate=4.0):
    # independent oracle: dense 2-D convolution with the discretized Gaussian
    radius = int(truncate * sigma + 0.5)
    x = np.arange(-radius, radius + 1)
    k1 = np.exp(-0.5 * (x / sigma) ** 2)
    k1 /= k1.sum()
    kernel = np.outer(k1, k1)
    h, w = arr.shape
    out = np.zeros_like(arr)
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for di in range(-radius, radius + 1):
                for dj in range(-radius, radius + 1):
                    src = arr[_reflect_index(i + di, h), _reflect_index(j + dj, w)]
                    acc += kernel[di + radius, dj + radius] * src
            out[i, j] = acc
    return out


def test_blur_matches_direct_convolution_on_impulse():
    img = np.zeros((9, 9))
    img[4, 4] = 1.0
    policy = AugmentPolicy(blur_sigma_range=(2.0, 2.0))
    out = augment(gray(img), policy, seed=0)
    oracle = _direct_gaussian_blur(img, 2.0)
    np.testing.assert_allclose(out.pixels, np.clip(oracle, 0, 1), atol=1e-12)
    assert out.pixels[4, 4] < 1.0


def test_blur_matches_direct_convolution_on_random_image():
    rng = np.random.default_rng(4)
    img = rng.random((11, 13))
    policy = AugmentPolicy(blur_sigma_range=(1.3, 1.3))
    out = augment(gray(img), policy, seed=5)
    oracle = _direct_gaussian_blur(img, 1.3)
    np.testing.assert_allclose(out.pixels, np.clip(oracle, 0, 1), atol=1e-12)


def test_augment_output_stays_in_range():
    rng = np.random.default_rng(5)
    img = gray(rng.random((24, 24)))
    policy = AugmentPolicy(True, True, (0.0, 3.0), (0.0, 4.0))
    for seed in range(10):
        out = augment(img, policy, seed=seed)
        assert out.pixels.min() >= 0.0 and out.pixels.max() <= 1.0


# ---------------------------------------------------------------------------
# resize + standardization


def test_normalize_constant_image_is_zero():
    out = normalize_resize(gray(np.full((50, 60), 0.3)))
    assert out.shape == (224, 224)
    np.testing.assert_array_equal(out, np.zeros((224, 224)))


def test_normalize_mean_zero_std_one():
    rng = np.random.default_rng(6)
    out = normalize_resize(gray(rng.random((300, 200))))
    assert abs(out.mean()) < 1e-6
    assert abs(out.std() - 1.0) < 1e-6


def test_resize_of_224_image_is_pure_standardization():
    rng = np.random.default_rng(7)
    arr = rng.random((224, 224))
    out = normalize_resize(gray(arr))
    expected = (arr - arr.mean()) / arr.std()
    np.testing.assert_allclose(out, expected, atol=1e-10)


def test_downscale_preserves_affine_ramp():
    # bilinear resize reproduces an affine intensity field exactly away from
    # clamped borders; downscaling keeps all sample points interior
    h, w = 448, 448
    ys, xs = np.mgrid[0:h, 0:w]
    ramp = (0.1 + 0.3 * xs / w + 0.4 * ys / h)
    out = normalize_resize(gray(ramp))
    oy, ox = np.mgrid[0:224, 0:224]
    src_y = (oy + 0.5) * (h / 224) - 0.5
    src_x = (ox + 0.5) * (w / 224) - 0.5
    expected_raw = 0.1 + 0.3 * src_x / w + 0.4 * src_y / h
    expected = (expected_raw - expected_raw.mean()) / expected_raw.std()
    np.testing.assert_allclose(out, expected, atol=1e-9)


# ---------------------------------------------------------------------------
# patch featurizer


def test_featurize_constant_image():
    feats = patch_featurize(np.full((32, 32), 0.0), grid=3)
    assert feats.shape == (27,)
    np.testing.assert_allclose(feats, 0.0, atol=1e-15)


def test_featurize_single_cell_dim():
    rng = np.random.default_rng(8)
    feats = patch_featurize(rng.random((16, 16)), grid=1)
    assert feats.shape == (3,)


def test_featurize_vertical_step_hand_stats():
    # 8x8 image, columns 0..3 = 0.0 and 4..7 = 1.0, grid 2: left cell means 0,
    # right cell means 1, difference equals the step height
    img = np.zeros((8, 8))
    img[:, 4:] = 1.0
    feats = patch_featurize(img, grid=2).reshape(2, 2, 3)
    means = feats[:, :, 0]
    np.testing.assert_allclose(means, [[0.0, 1.0], [0.0, 1.0]], atol=1e-15)
    np.testing.assert_allclose(means[:, 1] - means[:, 0], 1.0)
    # independent recomputation of every cell statistic
    gy, gx = np.gradient(img)
    mag = np.hypot(gy, gx)
    for i in range(2):
        for j in range(2):
            cell = img[4 * i : 4 * i + 4, 4 * j : 4 * j + 4]
            cell_mag = mag[4 * i : 4 * i + 4, 4 * j : 4 * j + 4]
            np.testing.assert_allclose(
                feats[i, j], [cell.mean(), cell.std(), cell_mag.mean()], atol=1e-15
            )


def test_featurize_rotation_permutes_cell_means():
    rng = np.random.default_rng(9)
    img = rng.random((20, 20))
    g = 2
    base = patch_featurize(img, grid=g).reshape(g, g, 3)
    rotated = patch_featurize(np.rot90(img), grid=g).reshape(g, g, 3)
    for i in range(g):
        for j in range(g):
            # counterclockwise 90 degrees: new cell (i, j) holds old cell (j, g-1-i)
            assert rotated[i, j, 0] == pytest.approx(base[j, g - 1 - i, 0], abs=1e-12)


def test_featurize_bad_grid():
    img = np.zeros((224, 224))
    with pytest.raises(BadGrid):
        patch_featurize(img, grid=0)
    with pytest.raises(BadGrid):
        patch_featurize(img, grid=225)


def test_featurize_deterministic():
    rng = np.random.default_rng(10)
    img = rng.random((224, 224))
    a = patch_featurize(img, grid=4)
    b = patch_featurize(img, grid=4)
    assert a.tobytes() == b.tobytes()
    assert a.shape == (48,)


# ---------------------------------------------------------------------------
# PNG loading


def test_load_png_8bit_and_16bit(tmp_path):
    from PIL import Image

    arr8 = (np.arange(64, dtype=np.uint8).reshape(8, 8) * 4)
    Image.fromarray(arr8, mode="L").save(tmp_path / "g8.png")
    img8 = load_png(tmp_path / "g8.png")
    np.testing.assert_allclose(img8.pixels, arr8 / 255.0, atol=1e-12)

    arr16 = (np.arange(64, dtype=np.uint16).reshape(8, 8) * 1000)
    Image.fromarray(arr16).save(tmp_path / "g16.png")
    img16 = load_png(tmp_path / "g16.png")
    np.testing.assert_allclose(img16.pixels, arr16 / 65535.0, atol=1e-12)


def test_gray_image_rejects_out_of_range():
    with pytest.raises(ValueError):
        GrayImage.from_array(np.array([[0.0, 1.5]]))
    with pytest.raises(ValueError):
        GrayImage.from_array(np.array([[np.nan, 0.5]]))
