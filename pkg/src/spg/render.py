"""Heatmap overlays and box outlines, written as PPM images."""

from __future__ import annotations

import numpy as np

from spg.core import BBox, normalize_map, resize_bilinear
from spg.data import quantize, write_ppm

GREEN = (0.0, 1.0, 0.0)
RED = (1.0, 0.0, 0.0)


def heat_rgb(map_) -> np.ndarray:
    """Blue-to-red ramp: low values cold, high values hot, peak green mid-scale."""
    v = normalize_map(np.asarray(map_, dtype=np.float64))
    return np.stack([v, 4.0 * v * (1.0 - v), 1.0 - v], axis=-1)


def overlay_heatmap(image: np.ndarray, map_, alpha: float = 0.5) -> np.ndarray:
    """Blend a response map over an image; the map is normalized and resized
    to the image's resolution first."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"image must be (H, W, 3), got {image.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    h, w = image.shape[:2]
    m = normalize_map(np.asarray(map_, dtype=np.float64))
    if m.shape != (h, w):
        m = resize_bilinear(m, h, w)
    return (1.0 - alpha) * image + alpha * heat_rgb(m)


def draw_box(image: np.ndarray, box: BBox, color, thickness: int = 1) -> np.ndarray:
    """Copy of the image with a box outline drawn just inside the box edges."""
    if thickness < 1:
        raise ValueError("thickness must be >= 1")
    out = np.asarray(image, dtype=np.float64).copy()
    h, w = out.shape[:2]
    c0 = int(np.clip(np.floor(box.x0), 0, w - 1))
    r0 = int(np.clip(np.floor(box.y0), 0, h - 1))
    c1 = int(np.clip(np.ceil(box.x1) - 1, 0, w - 1))
    r1 = int(np.clip(np.ceil(box.y1) - 1, 0, h - 1))
    t = thickness
    color = np.asarray(color, dtype=np.float64)
    out[r0 : min(r0 + t, r1 + 1), c0 : c1 + 1] = color
    out[max(r1 - t + 1, r0) : r1 + 1, c0 : c1 + 1] = color
    out[r0 : r1 + 1, c0 : min(c0 + t, c1 + 1)] = color
    out[r0 : r1 + 1, max(c1 - t + 1, c0) : c1 + 1] = color
    return out


def render_localization(
    path,
    image: np.ndarray,
    map_,
    pred_boxes,
    gt_box: BBox | None = None,
    alpha: float = 0.5,
) -> None:
    """Heat overlay plus green predicted boxes and a red ground-truth box."""
    canvas = overlay_heatmap(image, map_, alpha)
    for box in pred_boxes:
        canvas = draw_box(canvas, box, GREEN)
    if gt_box is not None:
        canvas = draw_box(canvas, gt_box, RED)
    write_ppm(path, quantize(np.clip(canvas, 0.0, 1.0)))
