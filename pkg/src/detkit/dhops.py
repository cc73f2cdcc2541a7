"""Offset-shifted RoI average pooling and the controllable margin losses.

Offsets are inputs here, not predicted. Conventions:

* the feature map ``X`` has shape ``(H, W, Ch)`` and is indexed ``X[y, x]``;
* a RoI is ``(x0, y0, width, height)`` in grid units, split into ``k x k``
  bins; bin ``(i, j)`` is row ``i`` (y) and column ``j`` (x);
* an offset is ``(dx, dy)``; per-bin offsets have shape ``(k, k, 2)``, a
  global offset ``(1, 1, 2)``;
* a bin samples the integer lattice points of its half-open extent
  (``start <= p < end`` per axis), or its center along an axis that holds
  none; ``sampling="align"`` uses 2 regular samples per axis instead;
* samples are read by bilinear interpolation, positions clamped to the grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RoiSpec:
    x0: float
    y0: float
    width: float
    height: float
    k: int = 2

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not (self.width > 0 and self.height > 0):
            raise ValueError("RoI width and height must be positive")

    def check_inside(self, grid_shape):
        H, W = grid_shape[:2]
        if self.x0 < 0 or self.y0 < 0 or self.x0 + self.width > W or self.y0 + self.height > H:
            raise ValueError(f"RoI {self} exceeds the {H}x{W} grid")


@dataclass(frozen=True)
class CmlParams:
    m_c: float = 0.2
    m_r: float = 0.2

    def __post_init__(self):
        if self.m_c < 0 or self.m_r < 0:
            raise ValueError("margins must be nonnegative")


def as_grid(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[:, :, None]
    if X.ndim != 3 or min(X.shape) < 1:
        raise ValueError(f"feature grid must be (H, W, Ch), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("feature grid has non-finite values")
    return X


def bilinear(X: np.ndarray, xs, ys) -> np.ndarray:
    """Sample ``X`` at real positions; returns ``(len(xs), Ch)``."""
    H, W = X.shape[:2]
    xs = np.clip(np.asarray(xs, dtype=np.float64), 0.0, W - 1)
    ys = np.clip(np.asarray(ys, dtype=np.float64), 0.0, H - 1)
    xl = np.floor(xs).astype(np.intp)
    yl = np.floor(ys).astype(np.intp)
    xh = np.minimum(xl + 1, W - 1)
    yh = np.minimum(yl + 1, H - 1)
    ax = (xs - xl)[:, None]
    ay = (ys - yl)[:, None]
    top = (1 - ax) * X[yl, xl] + ax * X[yl, xh]
    bottom = (1 - ax) * X[yh, xl] + ax * X[yh, xh]
    return (1 - ay) * top + ay * bottom


def _axis_samples(start: float, size: float, sampling: str) -> np.ndarray:
    end = start + size
    if sampling == "align":
        return start + (np.arange(2) + 0.5) * size / 2
    pts = np.arange(math.ceil(start), math.ceil(end), dtype=np.float64)
    pts = pts[(pts >= start) & (pts < end)]
    if len(pts) == 0:
        return np.array([start + size / 2])
    return pts


def bin_samples(roi: RoiSpec, i: int, j: int, sampling: str = "lattice"):
    """Unshifted sample positions ``(xs, ys)`` of bin ``(i, j)`` (flattened grid)."""
    bw, bh = roi.width / roi.k, roi.height / roi.k
    xs = _axis_samples(roi.x0 + j * bw, bw, sampling)
    ys = _axis_samples(roi.y0 + i * bh, bh, sampling)
    gx, gy = np.meshgrid(xs, ys)
    return gx.ravel(), gy.ravel()


def _pool(X, roi: RoiSpec, offsets: np.ndarray, sampling: str, normalize: bool) -> np.ndarray:
    if sampling not in ("lattice", "align"):
        raise ValueError(f"unknown sampling {sampling!r}")
    X = as_grid(X)
    roi.check_inside(X.shape)
    if not np.all(np.isfinite(offsets)):
        raise ValueError("offsets must be finite")
    scale = np.array([roi.width, roi.height]) if normalize else np.ones(2)
    k = roi.k
    out = np.empty((k, k, X.shape[2]))
    for i in range(k):
        for j in range(k):
            xs, ys = bin_samples(roi, i, j, sampling)
            dx, dy = offsets[i, j] * scale
            out[i, j] = bilinear(X, xs + dx, ys + dy).mean(axis=0)
    return out


def dhpool_cls(X, roi: RoiSpec, offsets, sampling: str = "lattice", normalize: bool = False) -> np.ndarray:
    """Pooled ``(k, k, Ch)`` feature with a separate ``(dx, dy)`` shift per bin."""
    offsets = np.asarray(offsets, dtype=np.float64)
    if offsets.shape != (roi.k, roi.k, 2):
        raise ValueError(f"per-bin offsets must have shape {(roi.k, roi.k, 2)}, got {offsets.shape}")
    return _pool(X, roi, offsets, sampling, normalize)


def dhpool_reg(X, roi: RoiSpec, offset, sampling: str = "lattice", normalize: bool = False) -> np.ndarray:
    """Pooled ``(k, k, Ch)`` feature with one ``(dx, dy)`` shift shared by all bins."""
    offset = np.asarray(offset, dtype=np.float64)
    if offset.shape not in ((1, 1, 2), (2,)):
        raise ValueError(f"global offset must have shape (1, 1, 2), got {offset.shape}")
    full = np.broadcast_to(offset.reshape(1, 1, 2), (roi.k, roi.k, 2))
    return _pool(X, roi, full, sampling, normalize)


def roi_avg_pool(X, roi: RoiSpec, sampling: str = "lattice") -> np.ndarray:
    """Plain average RoI pooling over the same sample points."""
    return _pool(X, roi, np.zeros((roi.k, roi.k, 2)), sampling, False)


def cml_cls(s_orig, s_dh, m_c: float = 0.2):
    """Hinge ``max(0, s_orig - s_dh + m_c)``: the decoupled score must win by ``m_c``."""
    out = np.maximum(0.0, np.asarray(s_orig, dtype=np.float64) - np.asarray(s_dh, dtype=np.float64) + m_c)
    return float(out) if out.ndim == 0 else out


def cml_reg(iou_orig, iou_dh, m_r: float = 0.2):
    """Hinge ``max(0, iou_orig - iou_dh + m_r)`` on refined-box IoUs."""
    out = np.maximum(0.0, np.asarray(iou_orig, dtype=np.float64) - np.asarray(iou_dh, dtype=np.float64) + m_r)
    return float(out) if out.ndim == 0 else out
