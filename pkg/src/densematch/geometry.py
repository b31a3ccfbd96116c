"""Box representations, conversions and overlap metrics.

Boxes are stored in normalized center-size form ``(cx, cy, w, h)``; the
corner form ``(x0, y0, x1, y1)`` is derived on demand.  Scalar functions
operate on :class:`Box` values, the ``pairwise_*`` helpers on ``(N, 4)``
center-size arrays and are what the matcher and trainer use in hot loops.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

# Boxes whose clipped area falls below this fraction of the canvas are dropped.
MIN_BOX_AREA = 1e-6


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"box has non-finite coordinates: {vals}")
        if self.w < 0 or self.h < 0:
            raise ValueError(f"box has negative size: w={self.w}, h={self.h}")

    @classmethod
    def from_corners(cls, x0: float, y0: float, x1: float, y1: float) -> "Box":
        if x1 < x0 or y1 < y0:
            raise ValueError(f"corners out of order: {(x0, y0, x1, y1)}")
        return cls((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)

    @property
    def corners(self) -> Tuple[float, float, float, float]:
        hw, hh = self.w / 2.0, self.h / 2.0
        return (self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh)

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)


@dataclass(frozen=True)
class Target:
    """A ground-truth box with an integer class label."""

    box: Box
    label: int = 0


@dataclass(frozen=True)
class Prediction:
    """A predicted box with per-class foreground probabilities.

    The toy setting uses a single foreground class, so ``probs`` is usually
    a one-element tuple.
    """

    box: Box
    probs: Tuple[float, ...] = field(default=(0.0,))

    def prob(self, label: int) -> float:
        return self.probs[label]


def _intersection(a: Box, b: Box) -> float:
    ax0, ay0, ax1, ay1 = a.corners
    bx0, by0, bx1, by1 = b.corners
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    return iw * ih


def _corner_area(b: Box) -> float:
    x0, y0, x1, y1 = b.corners
    return (x1 - x0) * (y1 - y0)


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 when both boxes have zero area."""
    inter = _intersection(a, b)
    # areas from corners, like the intersection, so iou(a, a) is exactly 1
    union = _corner_area(a) + _corner_area(b) - inter
    if union <= 0:
        return 0.0
    # corner arithmetic can put inter a rounding step above union
    return min(inter / union, 1.0)


def giou(a: Box, b: Box) -> float:
    """Generalized IoU, ``iou - (enclosure - union) / enclosure``.

    Returns 0 when the enclosing box has zero area.
    """
    ax0, ay0, ax1, ay1 = a.corners
    bx0, by0, bx1, by1 = b.corners
    enclosure = (max(ax1, bx1) - min(ax0, bx0)) * (max(ay1, by1) - min(ay0, by0))
    if enclosure <= 0:
        return 0.0
    inter = _intersection(a, b)
    union = _corner_area(a) + _corner_area(b) - inter
    overlap = min(inter / union, 1.0) if union > 0 else 0.0
    return overlap - max(enclosure - union, 0.0) / enclosure


def clip(b: Box) -> Optional[Box]:
    """Clip to the unit canvas; ``None`` if the remainder is too small to keep."""
    x0, y0, x1, y1 = b.corners
    if x0 >= 0 and y0 >= 0 and x1 <= 1 and y1 <= 1:
        return b if b.area >= MIN_BOX_AREA else None
    x0, y0 = min(max(x0, 0.0), 1.0), min(max(y0, 0.0), 1.0)
    x1, y1 = min(max(x1, 0.0), 1.0), min(max(y1, 0.0), 1.0)
    if (x1 - x0) * (y1 - y0) < MIN_BOX_AREA:
        return None
    return Box.from_corners(x0, y0, x1, y1)


def transform(
    b: Box, scale: float, dx: float = 0.0, dy: float = 0.0, clip_to_canvas: bool = True
) -> Optional[Box]:
    """Scale a box about the canvas origin, then shift its center by ``(dx, dy)``.

    This is the coordinate map of mosaic quadrant placement.  With
    ``clip_to_canvas`` the result is clipped to ``[0, 1]^2`` and ``None`` is
    returned for boxes that no longer have a usable area.
    """
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    out = Box(b.cx * scale + dx, b.cy * scale + dy, b.w * scale, b.h * scale)
    if not clip_to_canvas:
        return out
    return clip(out)


# -- array helpers -----------------------------------------------------------


def boxes_to_array(boxes: Sequence[Box]) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, 4))
    return np.array([b.as_tuple() for b in boxes], dtype=float)


def cxcywh_to_xyxy(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    cx, cy, w, h = x[..., 0], x[..., 1], x[..., 2], x[..., 3]
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def xyxy_to_cxcywh(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    x0, y0, x1, y1 = x[..., 0], x[..., 1], x[..., 2], x[..., 3]
    return np.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], axis=-1)


def _pairwise_parts(a: np.ndarray, b: np.ndarray):
    ca, cb = cxcywh_to_xyxy(a), cxcywh_to_xyxy(b)
    area_a = (ca[:, 2] - ca[:, 0]) * (ca[:, 3] - ca[:, 1])
    area_b = (cb[:, 2] - cb[:, 0]) * (cb[:, 3] - cb[:, 1])
    lt = np.maximum(ca[:, None, :2], cb[None, :, :2])
    rb = np.minimum(ca[:, None, 2:], cb[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    return ca, cb, inter, union


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU matrix ``[len(a), len(b)]`` for center-size arrays."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    _, _, inter, union = _pairwise_parts(a, b)
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return np.minimum(out, 1.0)


def pairwise_giou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Generalized IoU matrix for center-size arrays (0 where the enclosure is empty)."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    ca, cb, inter, union = _pairwise_parts(a, b)
    overlap = np.zeros_like(inter)
    np.divide(inter, union, out=overlap, where=union > 0)
    np.minimum(overlap, 1.0, out=overlap)
    lt = np.minimum(ca[:, None, :2], cb[None, :, :2])
    rb = np.maximum(ca[:, None, 2:], cb[None, :, 2:])
    wh = rb - lt
    enclosure = wh[..., 0] * wh[..., 1]
    out = np.zeros_like(inter)
    ok = enclosure > 0
    out[ok] = overlap[ok] - np.maximum(enclosure[ok] - union[ok], 0.0) / enclosure[ok]
    return out
