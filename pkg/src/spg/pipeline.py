"""From a trained network to rankings, boxes, map dumps, and scoring records."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import torch

from spg.data import ImageRecord
from spg.dumps import write_map_dump
from spg.evaluation import EvalRecord
from spg.guidance import GuidanceConfig, fuse_guidance
from spg.localization import extract_bboxes, select_threshold
from spg.model import SpgNetwork, extract_attention, predict_topk


@dataclass
class DatasetOutputs:
    """Stacked per-image network outputs for a whole record list."""

    logits: np.ndarray
    probs: np.ndarray
    f_a4: np.ndarray
    f_b1: np.ndarray | None
    f_b2: np.ndarray | None
    f_c: np.ndarray | None


def forward_dataset(model: SpgNetwork, records, batch_size: int = 64) -> DatasetOutputs:
    records = list(records)
    if not records:
        raise ValueError("no records to run")
    images = np.stack([r.pixels for r in records])
    x = torch.from_numpy(images.transpose(0, 3, 1, 2).copy())
    x = x.to(next(model.parameters()).dtype)
    chunks = []
    model.eval()
    with torch.no_grad():
        for start in range(0, x.shape[0], batch_size):
            chunks.append(model(x[start : start + batch_size]))
    cat = lambda pick: torch.cat([pick(c) for c in chunks]).numpy()
    maybe = lambda pick: cat(pick) if pick(chunks[0]) is not None else None
    return DatasetOutputs(
        logits=cat(lambda c: c.logits),
        probs=cat(lambda c: c.class_probs),
        f_a4=cat(lambda c: c.f_a4),
        f_b1=maybe(lambda c: c.f_b1),
        f_b2=maybe(lambda c: c.f_b2),
        f_c=maybe(lambda c: c.f_c),
    )


def _image_hw(record: ImageRecord) -> tuple[int, int]:
    return record.pixels.shape[0], record.pixels.shape[1]


def predict_records(
    model: SpgNetwork,
    records,
    tau: float,
    max_boxes: int = 2,
    external_rankings=None,
    batch_size: int = 64,
) -> list[EvalRecord]:
    """Scoring records for annotated images.

    Boxes are extracted from the per-class response maps for the five
    top-ranked classes, the ground-truth class, and any externally ranked
    classes, so every mode and ranking substitution can be scored.
    """
    records = list(records)
    outputs = forward_dataset(model, records, batch_size)
    out = []
    for i, rec in enumerate(records):
        if rec.box is None:
            raise ValueError(f"{rec.image_id}: no ground-truth box; use an annotated split")
        k = min(5, outputs.logits.shape[1])
        ranking = tuple(int(c) for c in predict_topk(outputs.logits[i], k))
        wanted = set(ranking) | {rec.label}
        if external_rankings is not None:
            wanted |= {int(c) for c in external_rankings.get(rec.image_id, ())}
        boxes = {}
        for class_id in sorted(wanted):
            attention = extract_attention(outputs.f_a4[i], class_id)
            boxes[class_id] = tuple(extract_bboxes(attention, _image_hw(rec), tau, max_boxes))
        out.append(EvalRecord(rec.image_id, rec.label, rec.box, ranking, boxes))
    return out


def threshold_search(model: SpgNetwork, records, batch_size: int = 64):
    """Pick the binarization threshold on an annotated split using the
    ground-truth class's map for every image."""
    records = list(records)
    outputs = forward_dataset(model, records, batch_size)
    entries = []
    for i, rec in enumerate(records):
        if rec.box is None:
            raise ValueError(f"{rec.image_id}: no ground-truth box; use an annotated split")
        attention = extract_attention(outputs.f_a4[i], rec.label)
        entries.append((attention, _image_hw(rec), rec.box))
    return select_threshold(entries)


def predictions_table(eval_records) -> list[str]:
    """Tab-separated lines: image_id, rank (1-based), class_id, then the
    primary box for that class."""
    lines = ["image_id\trank\tclass_id\tx0\ty0\tx1\ty1"]
    for rec in eval_records:
        for rank, class_id in enumerate(rec.ranking, start=1):
            box = rec.boxes[class_id][0]
            lines.append(
                f"{rec.image_id}\t{rank}\t{class_id}\t{box.x0:g}\t{box.y0:g}\t{box.x1:g}\t{box.y1:g}"
            )
    return lines


def export_map_dumps(
    model: SpgNetwork,
    records,
    out_dir,
    guidance: GuidanceConfig | None = None,
    batch_size: int = 64,
) -> list[str]:
    """Write per-image SPGM dumps: the ground-truth-class attention map, the
    three branch maps when present, and the fused seed mask. Returns the
    written paths."""
    guidance = guidance or GuidanceConfig()
    records = list(records)
    outputs = forward_dataset(model, records, batch_size)
    os.makedirs(out_dir, exist_ok=True)
    written = []

    def dump(image_id, kind, arr):
        path = os.path.join(out_dir, f"{image_id}.{kind}.spgm")
        write_map_dump(path, image_id, kind, arr)
        written.append(path)

    for i, rec in enumerate(records):
        attention = extract_attention(outputs.f_a4[i], rec.label)
        dump(rec.image_id, "attention", attention)
        if outputs.f_b1 is not None:
            dump(rec.image_id, "B1", outputs.f_b1[i])
            dump(rec.image_id, "B2", outputs.f_b2[i])
            fused = fuse_guidance(outputs.f_b1[i], outputs.f_b2[i], guidance.fuse_thresholds)
            dump(rec.image_id, "fused_mask", fused.astype(np.float32))
        if outputs.f_c is not None:
            dump(rec.image_id, "C", outputs.f_c[i])
    return written
