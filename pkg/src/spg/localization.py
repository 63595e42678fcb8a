"""Turning a response map into bounding boxes.

The pipeline is: min-max normalize, bilinearly resize to the target image
size, keep cells at or above the threshold, group them with 8-connectivity,
and wrap the largest groups in tight boxes. An empty foreground falls back to
the full-image box.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from spg.core import BBox, _require_map, normalize_map, resize_bilinear

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)
DEFAULT_TAUS = tuple(round(0.05 * i, 2) for i in range(1, 20))


def prepare_map(map_, out_hw: tuple[int, int]) -> np.ndarray:
    """Normalized map resized to the target resolution."""
    m = normalize_map(np.asarray(map_, dtype=np.float64))
    if m.shape != tuple(out_hw):
        m = resize_bilinear(m, out_hw[0], out_hw[1])
    return m


def boxes_from_scores(scores: np.ndarray, tau: float, max_boxes: int = 1) -> list[BBox]:
    """Boxes for the largest 8-connected regions of scores >= tau.

    Regions are ordered by cell count, ties broken by earliest cell in raster
    order. Returns at most max_boxes boxes; with no foreground at all, the
    single full-image box.
    """
    scores = _require_map(scores, "scores")
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    if max_boxes < 1:
        raise ValueError(f"max_boxes must be >= 1, got {max_boxes}")
    h, w = scores.shape
    fg = scores >= tau
    if not fg.any():
        return [BBox(0.0, 0.0, float(w), float(h))]
    labels, count = ndimage.label(fg, structure=EIGHT_CONNECTED)
    flat = labels.ravel()
    sizes = np.bincount(flat, minlength=count + 1)
    firsts = np.full(count + 1, flat.size, dtype=np.int64)
    np.minimum.at(firsts, flat, np.arange(flat.size))
    order = sorted(range(1, count + 1), key=lambda c: (-sizes[c], firsts[c]))
    boxes = []
    for comp in order[:max_boxes]:
        rows, cols = np.nonzero(labels == comp)
        boxes.append(
            BBox(float(cols.min()), float(rows.min()), float(cols.max() + 1), float(rows.max() + 1))
        )
    return boxes


def extract_bboxes(map_, out_hw: tuple[int, int], tau: float, max_boxes: int = 1) -> list[BBox]:
    """Boxes at image scale for the strongest regions of a response map."""
    return boxes_from_scores(prepare_map(map_, out_hw), tau, max_boxes)


def select_threshold(entries, taus=DEFAULT_TAUS):
    """Grid-search the binarization threshold on held-out data.

    entries: iterable of (map_, image_hw, gt_box). For each candidate tau the
    top box is extracted from every map and counted correct when its overlap
    with the ground truth exceeds 0.5. Returns (best_tau, accuracy_by_tau);
    ties go to the smallest tau.
    """
    from spg.core import iou

    prepared = [(prepare_map(m, hw), gt) for m, hw, gt in entries]
    if not prepared:
        raise ValueError("no entries to search over")
    accuracy_by_tau: dict[float, float] = {}
    best_tau = None
    best_acc = -1.0
    for tau in taus:
        hits = sum(1 for scores, gt in prepared if iou(boxes_from_scores(scores, tau, 1)[0], gt) > 0.5)
        acc = hits / len(prepared)
        accuracy_by_tau[float(tau)] = acc
        if acc > best_acc:
            best_acc = acc
            best_tau = float(tau)
    return best_tau, accuracy_by_tau
