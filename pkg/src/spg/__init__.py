"""Weakly-supervised object localization from self-generated guidance masks, desk scale."""

__version__ = "0.1.0"

from spg.core import BBox, Thresholds, iou, normalize_map, resize_bilinear, resize_nearest

__all__ = [
    "BBox",
    "Thresholds",
    "iou",
    "normalize_map",
    "resize_bilinear",
    "resize_nearest",
    "__version__",
]
