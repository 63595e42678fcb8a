"""Shared geometric and map primitives: score maps, tri-state masks, boxes, resizing, IoU.

Localization maps are 2-D float arrays (rows = y, cols = x). Guidance masks are
2-D uint8 arrays over the alphabet {0, 1, 255}: background, foreground, ignored.
Boxes live in continuous image coordinates with a half-open convention, so a box
covering pixel columns c0..c1-1 and rows r0..r1-1 is (x0=c0, y0=r0, x1=c1, y1=r1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BACKGROUND = 0
FOREGROUND = 1
IGNORED = 255
MASK_LABELS = (BACKGROUND, FOREGROUND, IGNORED)


class DataFormatError(ValueError):
    """Malformed on-disk data; messages carry file and line where possible."""


@dataclass(frozen=True)
class Thresholds:
    """Double-threshold pair with 0 < lo < hi < 1."""

    lo: float
    hi: float

    def __post_init__(self):
        if not (0.0 < self.lo < self.hi < 1.0):
            raise ValueError(f"thresholds must satisfy 0 < lo < hi < 1, got ({self.lo}, {self.hi})")


@dataclass(frozen=True)
class BBox:
    """Axis-aligned rectangle [x0, x1) x [y0, y1) in continuous image coordinates."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        coords = (self.x0, self.y0, self.x1, self.y1)
        if not all(np.isfinite(c) for c in coords):
            raise ValueError(f"box coordinates must be finite, got {coords}")
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"degenerate box {coords}")

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return self.width * self.height


def iou(a: BBox, b: BBox) -> float:
    """Intersection-over-union of two boxes under the half-open convention."""
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def _require_map(arr: np.ndarray, name: str = "map") -> np.ndarray:
    arr = np.asarray(arr)
    if arr.ndim != 2 or arr.size == 0:
        raise ValueError(f"{name} must be a non-empty 2-D array, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    return arr


def validate_mask(mask: np.ndarray) -> np.ndarray:
    """Check a tri-state mask: 2-D, non-empty, labels within {0, 1, 255}."""
    mask = np.asarray(mask)
    if mask.ndim != 2 or mask.size == 0:
        raise ValueError(f"mask must be a non-empty 2-D array, got shape {mask.shape}")
    if not np.isin(mask, MASK_LABELS).all():
        bad = np.unique(mask[~np.isin(mask, MASK_LABELS)])
        raise ValueError(f"mask contains labels outside {{0, 1, 255}}: {bad}")
    return mask.astype(np.uint8, copy=False)


def normalize_map(map_: np.ndarray) -> np.ndarray:
    """Min-max normalize a score map into [0, 1].

    A constant map normalizes to all zeros, i.e. no evidence anywhere.
    Idempotent: applying it twice gives bitwise the same result.
    """
    m = _require_map(map_)
    lo = m.min()
    hi = m.max()
    if hi == lo:
        return np.zeros_like(m)
    return (m - lo) / (hi - lo)


def _corner_aligned_positions(n_out: int, n_in: int) -> np.ndarray:
    # Output sample i sits at source coordinate i*(n_in-1)/(n_out-1); a single
    # output row/column collapses to the first source position.
    if n_out == 1:
        return np.zeros(1)
    return np.arange(n_out) * ((n_in - 1) / (n_out - 1))


def resize_bilinear(map_: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a score map with corner-aligned bilinear sampling.

    Resizing to the source size is the identity.
    """
    m = _require_map(map_)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {(out_h, out_w)}")
    h, w = m.shape
    if (out_h, out_w) == (h, w):
        return m.copy()
    ry = _corner_aligned_positions(out_h, h)
    rx = _corner_aligned_positions(out_w, w)
    y0 = np.floor(ry).astype(np.intp)
    x0 = np.floor(rx).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ry - y0)[:, None]
    fx = (rx - x0)[None, :]
    top = m[np.ix_(y0, x0)] * (1.0 - fx) + m[np.ix_(y0, x1)] * fx
    bot = m[np.ix_(y1, x0)] * (1.0 - fx) + m[np.ix_(y1, x1)] * fx
    return top * (1.0 - fy) + bot * fy


def resize_nearest(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a tri-state mask with nearest-neighbor sampling on the corner-aligned grid.

    The label alphabet is preserved exactly; resizing to the source size is the identity.
    """
    m = validate_mask(mask)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {(out_h, out_w)}")
    h, w = m.shape
    if (out_h, out_w) == (h, w):
        return m.copy()
    ys = np.floor(_corner_aligned_positions(out_h, h) + 0.5).astype(np.intp)
    xs = np.floor(_corner_aligned_positions(out_w, w) + 0.5).astype(np.intp)
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    return m[np.ix_(ys, xs)]
