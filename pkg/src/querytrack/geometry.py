"""Bounding-box algebra and positional encodings.

Boxes are center-size normalized to the unit image square: (cx, cy, w, h)
with centers in [0, 1] and sides in (0, 1]. Derived corners may stick out
of the square; they are clipped only at explicit clip points, never
silently in the math. Two parallel implementations exist on purpose: plain
float functions for matching/metrics and tensor functions for the loss
path, cross-checked in the tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        for field in ("cx", "cy", "w", "h"):
            value = getattr(self, field)
            if not math.isfinite(value):
                raise ValueError(f"box {field} is not finite: {value}")
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ValueError(f"box center out of range: ({self.cx}, {self.cy})")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise ValueError(f"box sides out of range: ({self.w}, {self.h})")

    def corners(self) -> Tuple[float, float, float, float]:
        return (self.cx - self.w / 2.0, self.cy - self.h / 2.0,
                self.cx + self.w / 2.0, self.cy + self.h / 2.0)

    def area(self) -> float:
        return self.w * self.h

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)


def box_from_corners(x0: float, y0: float, x1: float, y1: float) -> Box:
    return Box((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)


def clip_box_to_unit(box: Box, min_side: float = 1e-6) -> Optional[Box]:
    """Clip corners to the unit square; drop boxes that degenerate."""
    x0, y0, x1, y1 = box.corners()
    x0, y0 = max(0.0, x0), max(0.0, y0)
    x1, y1 = min(1.0, x1), min(1.0, y1)
    if x1 - x0 < min_side or y1 - y0 < min_side:
        return None
    return box_from_corners(x0, y0, x1, y1)


def iou(a: Box, b: Box) -> float:
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a.area() + b.area() - inter
    return inter / union


def giou(a: Box, b: Box) -> float:
    """Generalized IoU: IoU minus the hull fraction not covered by the union."""
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a.area() + b.area() - inter
    hull = (max(ax1, bx1) - min(ax0, bx0)) * (max(ay1, by1) - min(ay0, by0))
    return inter / union - (hull - union) / hull


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU for [N,4] x [G,4] center-size arrays (plain numpy)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ax0, ay0 = a[:, 0] - a[:, 2] / 2, a[:, 1] - a[:, 3] / 2
    ax1, ay1 = a[:, 0] + a[:, 2] / 2, a[:, 1] + a[:, 3] / 2
    bx0, by0 = b[:, 0] - b[:, 2] / 2, b[:, 1] - b[:, 3] / 2
    bx1, by1 = b[:, 0] + b[:, 2] / 2, b[:, 1] + b[:, 3] / 2
    iw = np.maximum(0.0, np.minimum(ax1[:, None], bx1[None, :]) - np.maximum(ax0[:, None], bx0[None, :]))
    ih = np.maximum(0.0, np.minimum(ay1[:, None], by1[None, :]) - np.maximum(ay0[:, None], by0[None, :]))
    inter = iw * ih
    area_a = (a[:, 2] * a[:, 3])[:, None]
    area_b = (b[:, 2] * b[:, 3])[None, :]
    union = area_a + area_b - inter
    return inter / union


def giou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise GIoU for [N,4] x [G,4] center-size arrays (plain numpy)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ax0, ay0 = a[:, 0] - a[:, 2] / 2, a[:, 1] - a[:, 3] / 2
    ax1, ay1 = a[:, 0] + a[:, 2] / 2, a[:, 1] + a[:, 3] / 2
    bx0, by0 = b[:, 0] - b[:, 2] / 2, b[:, 1] - b[:, 3] / 2
    bx1, by1 = b[:, 0] + b[:, 2] / 2, b[:, 1] + b[:, 3] / 2
    iw = np.maximum(0.0, np.minimum(ax1[:, None], bx1[None, :]) - np.maximum(ax0[:, None], bx0[None, :]))
    ih = np.maximum(0.0, np.minimum(ay1[:, None], by1[None, :]) - np.maximum(ay0[:, None], by0[None, :]))
    inter = iw * ih
    area_a = (a[:, 2] * a[:, 3])[:, None]
    area_b = (b[:, 2] * b[:, 3])[None, :]
    union = area_a + area_b - inter
    hull_w = np.maximum(ax1[:, None], bx1[None, :]) - np.minimum(ax0[:, None], bx0[None, :])
    hull_h = np.maximum(ay1[:, None], by1[None, :]) - np.minimum(ay0[:, None], by0[None, :])
    hull = hull_w * hull_h
    return inter / union - (hull - union) / hull


# ---------------------------------------------------------------------------
# differentiable variants for the loss path


def _corner_parts(t: Tensor):
    cx, cy, w, h = t[:, 0], t[:, 1], t[:, 2], t[:, 3]
    return cx - w * 0.5, cy - h * 0.5, cx + w * 0.5, cy + h * 0.5, w * h


def paired_giou(pred: Tensor, target) -> Tensor:
    """Row-by-row GIoU of two [N,4] center-size tensors. Returns [N]."""
    target = ad.as_tensor(target)
    ax0, ay0, ax1, ay1, area_a = _corner_parts(pred)
    bx0, by0, bx1, by1, area_b = _corner_parts(target)
    iw = ad.relu(ad.minimum(ax1, bx1) - ad.maximum(ax0, bx0))
    ih = ad.relu(ad.minimum(ay1, by1) - ad.maximum(ay0, by0))
    inter = iw * ih
    union = area_a + area_b - inter
    hull = (ad.maximum(ax1, bx1) - ad.minimum(ax0, bx0)) * (ad.maximum(ay1, by1) - ad.minimum(ay0, by0))
    return inter / union - (hull - union) / hull


def inverse_sigmoid(x: np.ndarray, eps: float = 1e-7) -> np.ndarray:
    x = np.clip(np.asarray(x, dtype=np.float64), eps, 1.0 - eps)
    return np.log(x / (1.0 - x))


def inverse_sigmoid_t(x: Tensor, eps: float = 1e-7) -> Tensor:
    clipped = ad.minimum(ad.maximum(x, eps), 1.0 - eps)
    return ad.log(clipped / (1.0 - clipped))


# ---------------------------------------------------------------------------
# sinusoidal positional encodings


def encode_boxes(boxes, d_model: int) -> Tensor:
    """Sin-cos encoding of [N,4] boxes: one block of d_model/4 per coordinate.

    Requires d_model divisible by 8 so each coordinate block interleaves a
    whole number of sin/cos pairs. Entries lie in [-1, 1].
    """
    if d_model % 8 != 0:
        raise ValueError(f"box encoding needs d_model divisible by 8, got {d_model}")
    return ad.sincos_embed(boxes, d_model)


def box_positional_encoding(box: Box, d_model: int) -> Tensor:
    return encode_boxes(ad.Tensor(box.as_array()[None, :]), d_model)[0, :]


def encode_points(points, d_model: int) -> Tensor:
    """Sin-cos encoding of [N,2] points (e.g. grid cell centers)."""
    if d_model % 4 != 0:
        raise ValueError(f"point encoding needs d_model divisible by 4, got {d_model}")
    return ad.sincos_embed(points, d_model)
