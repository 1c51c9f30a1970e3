"""Axis-aligned boxes in pixel-corner and normalized-center form, and IoU.

Coordinates are continuous: a box covers the real interval [x_min, x_max] and
its area is (x_max - x_min) * (y_max - y_min). Everything is float64.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


def _finite(*values):
    return all(math.isfinite(v) for v in values)


@dataclass(frozen=True)
class CornerBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not _finite(self.x_min, self.y_min, self.x_max, self.y_max):
            raise ValidationError(f"non-finite corner box {self}")
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValidationError(f"inverted corner box {self}")

    @property
    def width(self):
        return self.x_max - self.x_min

    @property
    def height(self):
        return self.y_max - self.y_min

    @property
    def area(self):
        return self.width * self.height

    def as_array(self):
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max], dtype=np.float64)

    def translate(self, dx, dy):
        return CornerBox(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)

    def clip(self, image_w, image_h):
        return CornerBox(
            min(max(self.x_min, 0.0), image_w),
            min(max(self.y_min, 0.0), image_h),
            min(max(self.x_max, 0.0), image_w),
            min(max(self.y_max, 0.0), image_h),
        )


@dataclass(frozen=True)
class CenterBox:
    """Center x, y and size w, h, all as fractions of the image size."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not _finite(self.x, self.y, self.w, self.h):
            raise ValidationError(f"non-finite center box {self}")
        if not (0.0 <= self.x <= 1.0 and 0.0 <= self.y <= 1.0):
            raise ValidationError(f"center outside [0,1]: {self}")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise ValidationError(f"width/height outside (0,1]: {self}")

    def as_array(self):
        return np.array([self.x, self.y, self.w, self.h], dtype=np.float64)


def _check_dims(image_w, image_h):
    if not (image_w > 0 and image_h > 0) or not _finite(image_w, image_h):
        raise ValidationError(f"image dimensions must be positive, got {image_w}x{image_h}")


def corner_to_center(box: CornerBox, image_w, image_h) -> CenterBox:
    _check_dims(image_w, image_h)
    if box.width <= 0 or box.height <= 0:
        raise ValidationError(f"degenerate box {box}")
    return CenterBox(
        (box.x_max + box.x_min) / (2.0 * image_w),
        (box.y_max + box.y_min) / (2.0 * image_h),
        (box.x_max - box.x_min) / image_w,
        (box.y_max - box.y_min) / image_h,
    )


def center_to_corner(box: CenterBox, image_w, image_h) -> CornerBox:
    _check_dims(image_w, image_h)
    half_w = box.w * image_w / 2.0
    half_h = box.h * image_h / 2.0
    cx = box.x * image_w
    cy = box.y * image_h
    return CornerBox(cx - half_w, cy - half_h, cx + half_w, cy + half_h)


def iou(a: CornerBox, b: CornerBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return min(1.0, inter / union)


# Vectorised helpers on (..., 4) arrays. Used by the hot paths in nms, matching
# and target assignment; the dataclass functions above are the reference.

def center_to_corner_array(boxes):
    boxes = np.asarray(boxes, dtype=np.float64)
    half = boxes[..., 2:4] / 2.0
    return np.concatenate([boxes[..., 0:2] - half, boxes[..., 0:2] + half], axis=-1)


def corner_to_center_array(boxes):
    boxes = np.asarray(boxes, dtype=np.float64)
    size = boxes[..., 2:4] - boxes[..., 0:2]
    return np.concatenate([boxes[..., 0:2] + size / 2.0, size], axis=-1)


def iou_matrix(a, b):
    """Pairwise IoU between corner boxes a (N, 4) and b (M, 4) -> (N, M)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return np.clip(out, 0.0, 1.0)


def shape_iou(wh_a, wh_b):
    """IoU of boxes sharing a center, from (N, 2) and (M, 2) width/height arrays."""
    wh_a = np.asarray(wh_a, dtype=np.float64).reshape(-1, 2)
    wh_b = np.asarray(wh_b, dtype=np.float64).reshape(-1, 2)
    inter = np.minimum(wh_a[:, None, 0], wh_b[None, :, 0]) * np.minimum(wh_a[:, None, 1], wh_b[None, :, 1])
    union = wh_a[:, None, 0] * wh_a[:, None, 1] + wh_b[None, :, 0] * wh_b[None, :, 1] - inter
    return inter / union
