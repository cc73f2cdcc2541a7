"""Box geometry on normalized ``(x_min, y_min, x_max, y_max)`` corners."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np


@dataclass(frozen=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (0.0 <= self.x_min <= self.x_max <= 1.0 and 0.0 <= self.y_min <= self.y_max <= 1.0):
            raise ValueError(f"invalid normalized box {self.as_tuple()}")

    def as_tuple(self):
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    @property
    def is_degenerate(self) -> bool:
        return self.x_max == self.x_min or self.y_max == self.y_min


BoxLike = Union[BBox, Sequence[float], np.ndarray]


def _corners(b: BoxLike):
    if isinstance(b, BBox):
        return b.as_tuple()
    x0, y0, x1, y1 = b
    return float(x0), float(y0), float(x1), float(y1)


def _intersection(a, b) -> float:
    w = min(a[2], b[2]) - max(a[0], b[0])
    h = min(a[3], b[3]) - max(a[1], b[1])
    if w <= 0.0 or h <= 0.0:
        return 0.0
    return w * h


def area(b: BoxLike) -> float:
    x0, y0, x1, y1 = _corners(b)
    return max(x1 - x0, 0.0) * max(y1 - y0, 0.0)


def iou(a: BoxLike, b: BoxLike) -> float:
    """Intersection over union; 0 when the union is empty."""
    a, b = _corners(a), _corners(b)
    inter = _intersection(a, b)
    union = area(a) + area(b) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def ioa(a: BoxLike, b: BoxLike) -> float:
    """Intersection over the area of ``a``; 0 when ``a`` is degenerate."""
    a, b = _corners(a), _corners(b)
    area_a = area(a)
    if area_a <= 0.0:
        return 0.0
    return _intersection(a, b) / area_a


def areas(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return np.clip(boxes[:, 2] - boxes[:, 0], 0, None) * np.clip(boxes[:, 3] - boxes[:, 1], 0, None)


def _pairwise_intersection(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    return wh[..., 0] * wh[..., 1]


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU, shape ``(len(a), len(b))``.

    Agrees with :func:`iou` element by element, including the zero-union case.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    inter = _pairwise_intersection(a, b)
    union = areas(a)[:, None] + areas(b)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def ioa_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise intersection over the area of the row box."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    inter = _pairwise_intersection(a, b)
    area_a = np.broadcast_to(areas(a)[:, None], inter.shape)
    out = np.zeros_like(inter)
    np.divide(inter, area_a, out=out, where=area_a > 0)
    return out
