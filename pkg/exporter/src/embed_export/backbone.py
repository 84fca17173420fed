"""Backbone registry and the image -> pooled-feature pipeline."""
from __future__ import annotations

import math

import numpy as np
import torch
from PIL import Image

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
INPUT_SIZE = 224


class BackboneUnavailable(RuntimeError):
    """Named backbone unknown, or its pretrained weights cannot be loaded."""


def _resnet18(weights):
    from torchvision import models

    model = models.resnet18(weights=weights)
    stem = torch.nn.Sequential(*list(model.children())[:-1])  # drop the fc head
    stem.eval()
    return stem, 512


def load_backbone(name: str):
    """Return (module, feature width). Inference-only, eval mode.

    "resnet18" uses ImageNet weights (needs the torchvision cache or network);
    "resnet18-init" is the same architecture with a fixed seeded
    initialization, for fully offline deterministic exports.
    """
    if name == "resnet18":
        from torchvision import models

        try:
            return _resnet18(models.ResNet18_Weights.IMAGENET1K_V1)
        except Exception as exc:
            raise BackboneUnavailable(
                f"backbone 'resnet18' weights unavailable: {exc}"
            ) from exc
    if name == "resnet18-init":
        torch.manual_seed(0)
        return _resnet18(None)
    raise BackboneUnavailable(
        f"unknown backbone {name!r}; supported: resnet18, resnet18-init"
    )


def load_gray(path: str) -> np.ndarray:
    """8-/16-bit grayscale image scaled to [0, 1] float32."""
    with Image.open(path) as img:
        if img.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(img, dtype=np.float32) / 65535.0
        else:
            arr = np.asarray(img.convert("L"), dtype=np.float32) / 255.0
    return np.clip(arr, 0.0, 1.0)


def crop_inscribed_square(arr: np.ndarray, circle=None) -> np.ndarray:
    """Axis-aligned square inscribed in the field-of-view circle.

    Side floor(r * sqrt(2)), window centered on the circle center; `circle`
    is (cx, cy, r) in pixels, defaulting to the centered min(w, h)/2 circle.
    """
    h, w = arr.shape
    if circle is None:
        cx, cy, r = w / 2.0, h / 2.0, min(w, h) / 2.0
    else:
        cx, cy, r = circle
        if r <= 0 or cx - r < 0 or cy - r < 0 or cx + r > w or cy + r > h:
            raise ValueError(f"circle (cx={cx}, cy={cy}, r={r}) exceeds {w}x{h} image")
    side = math.floor(r * math.sqrt(2.0))
    if side < 1:
        raise ValueError(f"circle radius {r} too small to crop")
    col0 = math.floor(cx - side / 2.0 + 0.5)
    row0 = math.floor(cy - side / 2.0 + 0.5)
    return arr[row0 : row0 + side, col0 : col0 + side]


def to_model_input(arr: np.ndarray) -> torch.Tensor:
    """Resize to 224x224, replicate gray to RGB, ImageNet-normalize."""
    tens = torch.from_numpy(np.ascontiguousarray(arr))[None, None]
    tens = torch.nn.functional.interpolate(
        tens, size=(INPUT_SIZE, INPUT_SIZE), mode="bilinear", align_corners=False
    )
    tens = tens.repeat(1, 3, 1, 1)
    mean = torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1)
    std = torch.tensor(IMAGENET_STD).view(1, 3, 1, 1)
    return (tens - mean) / std


@torch.no_grad()
def pooled_features(stem: torch.nn.Module, batch: torch.Tensor) -> np.ndarray:
    """Global-average-pooled stem output, one float32 row per image."""
    out = stem(batch)
    return out.reshape(out.shape[0], -1).numpy().astype(np.float32)
