"""Image transforms: crop/resize augmentation and the three pair-composition functions.

All operations work on ``ImageTensor`` (channel-first float32). The ``stage``
field tracks whether values are still on the raw 0..255 scale or have been
mean/std normalized; compositions run on raw crops, normalization comes last.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import cv2
import numpy as np

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

RAW = "raw-8bit"
NORMALIZED = "normalized-float"


class Axis(enum.Enum):
    """Orientation of a center-half concatenation."""

    HORIZONTAL = "horizontal"  # halves side by side (split along width)
    VERTICAL = "vertical"      # halves stacked (split along height)


@dataclass
class ImageTensor:
    """A 3 x H x W float32 image plus its value-scale stage."""

    data: np.ndarray
    stage: str = RAW

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or self.data.shape[0] != 3:
            raise ValueError(f"expected 3 x H x W data, got shape {self.data.shape}")
        if self.height < 1 or self.width < 1:
            raise ValueError("image must be at least 1 x 1")

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @classmethod
    def from_uint8(cls, image: np.ndarray) -> "ImageTensor":
        """Wrap an H x W x 3 uint8 raster as a raw-stage tensor."""
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValueError(f"expected H x W x 3 uint8 image, got shape {image.shape}")
        return cls(data=image.transpose(2, 0, 1).astype(np.float32), stage=RAW)


@dataclass
class AugmentConfig:
    """Training-time augmentation settings."""

    out_size: int = 224
    crop_scale: tuple[float, float] = (0.6, 1.0)
    norm_mean: tuple[float, float, float] = IMAGENET_MEAN
    norm_std: tuple[float, float, float] = IMAGENET_STD

    def __post_init__(self):
        low, high = self.crop_scale
        if not 0.0 < low <= high <= 1.0:
            raise ValueError(f"crop_scale must satisfy 0 < low <= high <= 1, got {self.crop_scale}")
        if self.out_size % 2 != 0:
            raise ValueError("out_size must be even (center-half split must be integral)")
        if any(s == 0 for s in self.norm_std):
            raise ValueError("norm_std entries must be nonzero")


def _resize_bicubic(chw: np.ndarray, size: int) -> np.ndarray:
    hwc = np.ascontiguousarray(chw.transpose(1, 2, 0))
    resized = cv2.resize(hwc, (size, size), interpolation=cv2.INTER_CUBIC)
    return resized.transpose(2, 0, 1)


def random_resized_crop(
    img: ImageTensor,
    cfg: AugmentConfig,
    rng: np.random.Generator,
    aspect_range: tuple[float, float] = (3.0 / 4.0, 4.0 / 3.0),
) -> ImageTensor:
    """Crop a random area/aspect patch and resize it to out_size (bicubic).

    Samples an area fraction from cfg.crop_scale and a log-uniform aspect
    ratio; falls back to the largest valid center crop if ten attempts do
    not fit inside the image.
    """
    if img.stage != RAW:
        raise ValueError("random_resized_crop expects a raw-stage image")
    h, w = img.height, img.width
    area = h * w
    low, high = cfg.crop_scale
    log_lo, log_hi = math.log(aspect_range[0]), math.log(aspect_range[1])

    crop = None
    for _ in range(10):
        target_area = area * rng.uniform(low, high)
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        cw = int(round(math.sqrt(target_area * aspect)))
        ch = int(round(math.sqrt(target_area / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            crop = img.data[:, top:top + ch, left:left + cw]
            break
    if crop is None:
        # largest center crop with aspect clamped into range
        in_ratio = w / h
        if in_ratio < aspect_range[0]:
            cw, ch = w, min(h, int(round(w / aspect_range[0])))
        elif in_ratio > aspect_range[1]:
            cw, ch = min(w, int(round(h * aspect_range[1]))), h
        else:
            cw, ch = w, h
        top = (h - ch) // 2
        left = (w - cw) // 2
        crop = img.data[:, top:top + ch, left:left + cw]
    return ImageTensor(data=_resize_bicubic(crop, cfg.out_size), stage=RAW)


def resize_eval(img: ImageTensor, size: int) -> ImageTensor:
    """Deterministic bicubic resize to size x size; no cropping."""
    if img.stage != RAW:
        raise ValueError("resize_eval expects a raw-stage image")
    return ImageTensor(data=_resize_bicubic(img.data, size), stage=RAW)


def normalize(img: ImageTensor, mean, std) -> ImageTensor:
    """Scale raw values to [0, 1] then apply per-channel (x - mean) / std."""
    if img.stage != RAW:
        raise ValueError("image is already normalized")
    mean = np.asarray(mean, dtype=np.float32).reshape(3, 1, 1)
    std = np.asarray(std, dtype=np.float32).reshape(3, 1, 1)
    if np.any(std == 0):
        raise ValueError("std must be nonzero in every channel")
    return ImageTensor(data=(img.data / 255.0 - mean) / std, stage=NORMALIZED)


def _check_same_shape(a: ImageTensor, b: ImageTensor) -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(f"image shapes differ: {a.data.shape} vs {b.data.shape}")
    if a.stage != b.stage:
        raise ValueError(f"image stages differ: {a.stage} vs {b.stage}")


def compose_center_half(a: ImageTensor, b: ImageTensor, axis: Axis) -> ImageTensor:
    """Concatenate the center halves of two S x S images into one S x S image.

    Horizontal puts a's center columns [S/4, 3S/4) on the left and b's on the
    right; vertical does the same with rows. Pixels are copied bit-exactly.
    """
    _check_same_shape(a, b)
    s = a.height
    if a.width != s or b.width != s:
        raise ValueError("compose_center_half needs square inputs")
    if s % 2 != 0:
        raise ValueError("side length must be even")
    q = s // 4
    out = np.empty_like(a.data)
    if axis is Axis.HORIZONTAL:
        out[:, :, : s // 2] = a.data[:, :, q:q + s // 2]
        out[:, :, s // 2:] = b.data[:, :, q:q + s // 2]
    else:
        out[:, : s // 2, :] = a.data[:, q:q + s // 2, :]
        out[:, s // 2:, :] = b.data[:, q:q + s // 2, :]
    return ImageTensor(data=out, stage=a.stage)


def sample_axis(rng: np.random.Generator) -> Axis:
    """Draw the concatenation orientation, 50/50."""
    return Axis.HORIZONTAL if rng.random() < 0.5 else Axis.VERTICAL


def mixup(a: ImageTensor, b: ImageTensor, omega: float) -> ImageTensor:
    """Pixel-wise blend: omega * a + (1 - omega) * b."""
    _check_same_shape(a, b)
    if not 0.0 <= omega <= 1.0:
        raise ValueError(f"omega must be in [0, 1], got {omega}")
    data = np.float32(omega) * a.data + np.float32(1.0 - omega) * b.data
    return ImageTensor(data=data, stage=a.stage)


def cutmix(a: ImageTensor, b: ImageTensor, omega: float, rng: np.random.Generator) -> ImageTensor:
    """Paste a random alpha-scaled rectangle of b onto a at the same location.

    The rectangle is round(alpha*H) x round(alpha*W) with alpha = sqrt(1 - omega),
    positioned uniformly so it lies fully inside the image.
    """
    _check_same_shape(a, b)
    if not 0.0 <= omega <= 1.0:
        raise ValueError(f"omega must be in [0, 1], got {omega}")
    h, w = a.height, a.width
    alpha = math.sqrt(1.0 - omega)
    cut_h = int(round(alpha * h))
    cut_w = int(round(alpha * w))
    out = a.data.copy()
    if cut_h > 0 and cut_w > 0:
        top = int(rng.integers(0, h - cut_h + 1))
        left = int(rng.integers(0, w - cut_w + 1))
        out[:, top:top + cut_h, left:left + cut_w] = b.data[:, top:top + cut_h, left:left + cut_w]
    return ImageTensor(data=out, stage=a.stage)
