"""Grayscale image preprocessing for circular-field-of-view microscopy frames.

Pipeline: crop the axis-aligned square inscribed in the field-of-view circle,
optionally augment (training only), bilinear-resize to 224x224, standardize,
then summarize with a deterministic per-cell statistics featurizer so the
embedding pipeline runs without any external model.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

TARGET_SIZE = 224
STD_FLOOR = 1e-6
UNSHARP_SIGMA = 1.0  # fixed mask blur; the policy range controls the amount


class CircleOutOfBounds(ValueError):
    pass


class BadGrid(ValueError):
    pass


@dataclass(frozen=True)
class GrayImage:
    """Single-channel image, row-major intensities in [0, 1]."""

    width: int
    height: int
    pixels: np.ndarray  # (height, width) float64

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.shape != (self.height, self.width):
            raise ValueError(
                f"pixels shape {px.shape} != (height={self.height}, width={self.width})"
            )
        if self.width < 1 or self.height < 1:
            raise ValueError("image must be at least 1x1")
        if not np.all(np.isfinite(px)):
            raise ValueError("intensities must be finite")
        if px.size and (px.min() < 0.0 or px.max() > 1.0):
            raise ValueError("intensities must lie in [0, 1]")
        px = px.copy()
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "GrayImage":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(width=arr.shape[1], height=arr.shape[0], pixels=arr)


@dataclass(frozen=True)
class FovCircle:
    """Circular field of view in continuous pixel coordinates."""

    center_x: float
    center_y: float
    radius: float

    def check_inside(self, image: GrayImage) -> None:
        if self.radius <= 0:
            raise CircleOutOfBounds("radius must be positive")
        if (
            self.center_x - self.radius < 0
            or self.center_y - self.radius < 0
            or self.center_x + self.radius > image.width
            or self.center_y + self.radius > image.height
        ):
            raise CircleOutOfBounds(
                f"circle (cx={self.center_x}, cy={self.center_y}, r={self.radius}) "
                f"exceeds {image.width}x{image.height} image"
            )

    @classmethod
    def auto(cls, image: GrayImage) -> "FovCircle":
        """Centered circle with radius min(w, h) / 2."""
        return cls(image.width / 2.0, image.height / 2.0, min(image.width, image.height) / 2.0)


@dataclass(frozen=True)
class AugmentPolicy:
    enable_rotation: bool = False
    enable_flip: bool = False
    blur_sigma_range: tuple[float, float] = (0.0, 0.0)
    sharpness_range: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        for label, (lo, hi) in (
            ("blur_sigma_range", self.blur_sigma_range),
            ("sharpness_range", self.sharpness_range),
        ):
            if lo < 0 or hi < lo:
                raise ValueError(f"{label} must be ordered and non-negative")

    @classmethod
    def disabled(cls) -> "AugmentPolicy":
        return cls()


def crop_fov(image: GrayImage, circle: FovCircle) -> GrayImage:
    """Axis-aligned square inscribed in the circle: side floor(r * sqrt(2))."""
    circle.check_inside(image)
    side = math.floor(circle.radius * math.sqrt(2.0))
    if side < 1:
        raise CircleOutOfBounds(f"radius {circle.radius} too small to crop")
    col0 = math.floor(circle.center_x - side / 2.0 + 0.5)
    row0 = math.floor(circle.center_y - side / 2.0 + 0.5)
    tile = image.pixels[row0 : row0 + side, col0 : col0 + side]
    assert tile.shape == (side, side)
    return GrayImage.from_array(tile)


def augment(image: GrayImage, policy: AugmentPolicy, seed: int) -> GrayImage:
    """Seeded training-time transform: rotation, flips, blur, sharpness.

    All random values are drawn in a fixed order regardless of which
    transforms are enabled, so the same seed draws the same flip under any
    policy. Rotation uses bilinear resampling over reflect padding to avoid
    injecting a border gradient. Evaluation paths must not call this.
    """
    rng = np.random.default_rng(seed)
    angle = rng.uniform(0.0, 360.0)
    u_flip_h = rng.random()
    u_flip_v = rng.random()
    sigma = rng.uniform(*policy.blur_sigma_range)
    amount = rng.uniform(*policy.sharpness_range)

    out = image.pixels
    if policy.enable_rotation:
        out = ndimage.rotate(out, angle, reshape=False, order=1, mode="reflect")
    if policy.enable_flip:
        if u_flip_h < 0.5:
            out = out[:, ::-1]
        if u_flip_v < 0.5:
            out = out[::-1, :]
    if sigma > 0.0:
        out = ndimage.gaussian_filter(out, sigma, mode="reflect")
    if amount > 0.0:
        blurred = ndimage.gaussian_filter(out, UNSHARP_SIGMA, mode="reflect")
        out = out + amount * (out - blurred)
    return GrayImage.from_array(np.clip(out, 0.0, 1.0))


def _resize_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    if arr.min() == arr.max():  # exact for constants; interpolation noise would
        return np.full((out_h, out_w), arr.flat[0])  # otherwise leak past the std floor
    in_h, in_w = arr.shape
    ys = (np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5
    grid_y, grid_x = np.meshgrid(ys, xs, indexing="ij")
    return ndimage.map_coordinates(arr, [grid_y, grid_x], order=1, mode="nearest")


def normalize_resize(image: GrayImage) -> np.ndarray:
    """Bilinear resize to 224x224, then per-image standardization.

    Returns a float64 matrix with mean 0 and std 1. Images whose intensity
    std falls below the 1e-6 floor are constant up to rounding dust and map
    to exact zeros instead of dust amplified by the floored division.
    """
    resized = _resize_bilinear(image.pixels, TARGET_SIZE, TARGET_SIZE)
    std = resized.std()
    if std < STD_FLOOR:
        return np.zeros_like(resized)
    return (resized - resized.mean()) / std


def patch_featurize(image: np.ndarray, grid: int) -> np.ndarray:
    """Per-cell (mean, std, mean gradient magnitude) over a grid x grid tiling.

    Gradients are central differences over the full image; cells are
    near-equal integer tiles. Output is row-major over cells, dim 3 * grid^2.
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    if grid < 1 or grid > min(h, w):
        raise BadGrid(f"grid must be in [1, {min(h, w)}], got {grid}")
    gy, gx = np.gradient(image)
    mag = np.hypot(gy, gx)
    row_edges = [round(i * h / grid) for i in range(grid + 1)]
    col_edges = [round(j * w / grid) for j in range(grid + 1)]
    feats = np.empty(3 * grid * grid)
    k = 0
    for i in range(grid):
        for j in range(grid):
            cell = image[row_edges[i] : row_edges[i + 1], col_edges[j] : col_edges[j + 1]]
            cell_mag = mag[row_edges[i] : row_edges[i + 1], col_edges[j] : col_edges[j + 1]]
            feats[k : k + 3] = (cell.mean(), cell.std(), cell_mag.mean())
            k += 3
    return feats


def load_png(path) -> GrayImage:
    """Read an 8- or 16-bit grayscale PNG, scaling intensities to [0, 1]."""
    from PIL import Image

    with Image.open(path) as img:
        if img.mode in ("I;16", "I;16B", "I;16L"):
            arr = np.asarray(img, dtype=np.float64) / 65535.0
        elif img.mode == "I":
            arr = np.asarray(img, dtype=np.float64) / 65535.0
        else:
            arr = np.asarray(img.convert("L"), dtype=np.float64) / 255.0
    return GrayImage.from_array(np.clip(arr, 0.0, 1.0))
