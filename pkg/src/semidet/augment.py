"""Weak (geometric) and strong (photometric) augmentation pipelines.

The weak pipeline may flip and rescale; its geometry record maps boxes
between original and view coordinates exactly.  The strong pipeline is
strictly photometric, so boxes valid on the weak view are valid on the
strong view unchanged -- the coordinate contract the self-training loop
relies on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from .boxes import Box


@dataclass(frozen=True)
class AugPolicy:
    flip_prob: float = 0.5
    short_side_range: tuple[int, int] = (48, 96)
    grayscale_prob: float = 0.15
    blur_prob: float = 0.25
    blur_sigma: tuple[float, float] = (0.5, 1.5)
    cutout_count: tuple[int, int] = (1, 2)
    cutout_frac: tuple[float, float] = (0.10, 0.25)
    color_jitter: float = 0.2

    def __post_init__(self):
        for p in (self.flip_prob, self.grayscale_prob, self.blur_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")
        if self.short_side_range[0] <= 0 or self.short_side_range[1] < self.short_side_range[0]:
            raise ValueError("short_side_range must be positive and ordered")


@dataclass(frozen=True)
class Geometry:
    """Flip flag and scale factor; enough to map boxes exactly both ways."""

    flipped: bool
    scale: float
    orig_size: int
    view_size: int

    def apply_box(self, b: Box) -> Box:
        x0, y0 = b.x_min * self.scale, b.y_min * self.scale
        x1, y1 = b.x_max * self.scale, b.y_max * self.scale
        if self.flipped:
            x0, x1 = self.view_size - x1, self.view_size - x0
        return replace(b, x_min=x0, y_min=y0, x_max=x1, y_max=y1)

    def invert_box(self, b: Box) -> Box:
        x0, y0, x1, y1 = b.x_min, b.y_min, b.x_max, b.y_max
        if self.flipped:
            x0, x1 = self.view_size - x1, self.view_size - x0
        s = self.scale
        return replace(b, x_min=x0 / s, y_min=y0 / s, x_max=x1 / s, y_max=y1 / s)


def _resize_bilinear(image: np.ndarray, out_size: int) -> np.ndarray:
    """Square bilinear resize with half-pixel-centered sampling."""
    n = image.shape[0]
    if out_size == n:
        return image.copy()
    coords = (np.arange(out_size) + 0.5) * (n / out_size) - 0.5
    coords = np.clip(coords, 0.0, n - 1.0)
    i0 = np.floor(coords).astype(int)
    i1 = np.minimum(i0 + 1, n - 1)
    frac = coords - i0
    top = image[i0] * (1 - frac)[:, None, None] + image[i1] * frac[:, None, None]
    rows = top[:, i0] * (1 - frac)[None, :, None] + top[:, i1] * frac[None, :, None]
    return rows


def snap_to_stride(value: int, stride: int = 8) -> int:
    return max(stride, int(round(value / stride)) * stride)


def weak_augment(image: np.ndarray, boxes: list[Box], policy: AugPolicy,
                 rng: np.random.Generator,
                 scale_override: float | None = None) -> tuple[np.ndarray, list[Box], Geometry]:
    """Optional horizontal flip plus short-side rescale.

    The target short side is snapped to a multiple of the detector stride
    so views stay batchable.  Boxes that collapse below one pixel after
    rescaling are dropped.  ``scale_override`` pins the scale (the training
    loop samples one scale per batch).
    """
    n = image.shape[0]
    flipped = bool(rng.random() < policy.flip_prob)
    if scale_override is not None:
        scale = scale_override
        view_size = int(round(n * scale))
    else:
        lo, hi = policy.short_side_range
        view_size = snap_to_stride(int(rng.integers(lo, hi + 1)))
        scale = view_size / n
    view = _resize_bilinear(image, view_size)
    if flipped:
        view = view[:, ::-1].copy()
    geom = Geometry(flipped=flipped, scale=scale, orig_size=n, view_size=view_size)
    out_boxes = []
    for b in boxes:
        tb = geom.apply_box(b)
        if tb.x_max - tb.x_min >= 1.0 and tb.y_max - tb.y_min >= 1.0:
            out_boxes.append(tb)
    return view, out_boxes, geom


def sample_batch_scale(policy: AugPolicy, rng: np.random.Generator,
                       image_size: int) -> float:
    lo, hi = policy.short_side_range
    return snap_to_stride(int(rng.integers(lo, hi + 1))) / image_size


def strong_augment(weak_view: np.ndarray, policy: AugPolicy,
                   rng: np.random.Generator,
                   fill_value: np.ndarray | None = None) -> np.ndarray:
    """Photometric-only: color jitter, grayscale, blur, cutout.

    Spatial geometry is untouched, so weak-view box coordinates remain
    exactly valid on the returned view.
    """
    img = weak_view.copy()
    n_h, n_w = img.shape[:2]

    j = policy.color_jitter
    if j > 0:
        brightness = 1.0 + rng.uniform(-j, j)
        contrast = 1.0 + rng.uniform(-j, j)
        saturation = 1.0 + rng.uniform(-j, j)
        img = img * brightness
        mean = img.mean()
        img = (img - mean) * contrast + mean
        gray = img.mean(axis=2, keepdims=True)
        img = gray + (img - gray) * saturation

    if rng.random() < policy.grayscale_prob:
        img = np.repeat(img.mean(axis=2, keepdims=True), 3, axis=2)

    if rng.random() < policy.blur_prob:
        sigma = rng.uniform(*policy.blur_sigma)
        img = gaussian_filter(img, sigma=(sigma, sigma, 0.0))

    n_cut = int(rng.integers(policy.cutout_count[0], policy.cutout_count[1] + 1))
    fill = fill_value if fill_value is not None else np.array([0.5, 0.5, 0.5])
    for _ in range(n_cut):
        side = min(n_h, n_w)
        ch = max(1, int(rng.uniform(*policy.cutout_frac) * side))
        cw = max(1, int(rng.uniform(*policy.cutout_frac) * side))
        y0 = int(rng.integers(0, max(1, n_h - ch + 1)))
        x0 = int(rng.integers(0, max(1, n_w - cw + 1)))
        img[y0:y0 + ch, x0:x0 + cw] = fill

    return np.clip(img, 0.0, 1.0)


def identity_policy() -> AugPolicy:
    """All-off policy: strong_augment becomes the identity."""
    return AugPolicy(flip_prob=0.0, grayscale_prob=0.0, blur_prob=0.0,
                     cutout_count=(0, 0), color_jitter=0.0)
