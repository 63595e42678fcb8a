"""Localization scoring.

Each image carries a ground-truth class and box, a class ranking (best
first), and candidate boxes per class. Four accuracy notions:

  top1      ranked-first class is right and its box overlaps the truth
  top5      some rank whose class is right has an overlapping box
  top5star  the right class is in the top five and any of five candidate
            boxes drawn from the top three ranks (2, 2, 1) overlaps
  gt_known  the ground-truth class's own box overlaps, ranking ignored

Overlap means IoU strictly above the threshold (0.5 by default). All error
figures are percentages, 100 * (1 - correct / total).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

from spg.core import BBox, DataFormatError, iou

STAR_BOX_COUNTS = (2, 2, 1)
MODES = ("cls_top1", "cls_top5", "top1_loc", "top5_loc", "top5_star_loc", "gt_known_loc")


@dataclass(frozen=True)
class EvalRecord:
    """One image's ground truth plus everything needed to score it."""

    image_id: str
    label: int
    gt_box: BBox
    ranking: tuple[int, ...]
    boxes: Mapping[int, tuple[BBox, ...]]

    def __post_init__(self):
        if not self.ranking:
            raise ValueError(f"{self.image_id}: empty ranking")
        if len(set(self.ranking)) != len(self.ranking):
            raise ValueError(f"{self.image_id}: ranking repeats a class: {self.ranking}")
        if self.label not in self.boxes or not self.boxes[self.label]:
            raise ValueError(f"{self.image_id}: no boxes for ground-truth class {self.label}")


@dataclass(frozen=True)
class EvalReport:
    total: int
    correct: dict[str, int]
    errors: dict[str, float]

    def __getattr__(self, name: str) -> float:
        if name.endswith("_err") and name[:-4] in MODES:
            return self.errors[name[:-4]]
        raise AttributeError(name)

    def as_lines(self) -> list[str]:
        lines = [f"images={self.total}"]
        for mode in MODES:
            lines.append(f"{mode}_err={self.errors[mode]:.4f}")
        return lines

    def as_table(self) -> str:
        rows = [("metric", "correct", "total", "error%")]
        for mode in MODES:
            rows.append((mode, str(self.correct[mode]), str(self.total), f"{self.errors[mode]:.2f}"))
        widths = [max(len(r[i]) for r in rows) for i in range(4)]
        out = []
        for r in rows:
            out.append("  ".join(col.ljust(w) for col, w in zip(r, widths)).rstrip())
        return "\n".join(out)


def _primary_box(record: EvalRecord, class_id: int) -> BBox:
    try:
        candidates = record.boxes[class_id]
    except KeyError:
        raise ValueError(f"{record.image_id}: no boxes for ranked class {class_id}") from None
    if not candidates:
        raise ValueError(f"{record.image_id}: empty box list for class {class_id}")
    return candidates[0]


def score_record(record: EvalRecord, iou_threshold: float = 0.5) -> dict[str, bool]:
    """Per-image correctness flags for every mode."""
    gt = record.gt_box
    top5 = record.ranking[:5]
    hit = lambda box: iou(box, gt) > iou_threshold
    cls_top1 = top5[0] == record.label
    cls_top5 = record.label in top5
    top1_loc = cls_top1 and hit(_primary_box(record, top5[0]))
    top5_loc = cls_top5 and hit(_primary_box(record, record.label))
    star_candidates = []
    for rank, take in zip(record.ranking[:3], STAR_BOX_COUNTS):
        star_candidates.extend(record.boxes.get(rank, ())[:take])
    top5_star = cls_top5 and any(hit(b) for b in star_candidates)
    gt_known = hit(_primary_box(record, record.label))
    return {
        "cls_top1": cls_top1,
        "cls_top5": cls_top5,
        "top1_loc": top1_loc,
        "top5_loc": top5_loc,
        "top5_star_loc": top5_star,
        "gt_known_loc": gt_known,
    }


def evaluate(
    records: Sequence[EvalRecord],
    iou_threshold: float = 0.5,
    external_rankings: Mapping[str, Sequence[int]] | None = None,
) -> EvalReport:
    """Score a set of images; optionally substitute rankings from another
    classifier, keyed by image id (every image must be covered)."""
    records = list(records)
    if not records:
        raise ValueError("nothing to evaluate")
    if external_rankings is not None:
        swapped = []
        for r in records:
            if r.image_id not in external_rankings:
                raise ValueError(f"external rankings missing image {r.image_id!r}")
            ranking = tuple(int(c) for c in external_rankings[r.image_id])
            swapped.append(
                EvalRecord(r.image_id, r.label, r.gt_box, ranking, r.boxes)
            )
        records = swapped
    correct = {mode: 0 for mode in MODES}
    for r in records:
        flags = score_record(r, iou_threshold)
        for mode in MODES:
            correct[mode] += bool(flags[mode])
    total = len(records)
    errors = {mode: 100.0 * (1.0 - correct[mode] / total) for mode in MODES}
    return EvalReport(total=total, correct=correct, errors=errors)


# ---------------------------------------------------------------- rankings io


def write_rankings(path, rankings: Mapping[str, Sequence[int]]) -> None:
    """Tab-separated lines: image id then its ranked class ids, best first."""
    with open(path, "w") as fh:
        for image_id in rankings:
            cells = [image_id] + [str(int(c)) for c in rankings[image_id]]
            fh.write("\t".join(cells) + "\n")


def read_rankings(path) -> dict[str, tuple[int, ...]]:
    rankings: dict[str, tuple[int, ...]] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            cells = line.split("\t")
            if len(cells) < 2:
                raise DataFormatError(f"{path}:{lineno}: expected an id and class ids")
            image_id = cells[0]
            if image_id in rankings:
                raise DataFormatError(f"{path}:{lineno}: duplicate image id {image_id!r}")
            try:
                classes = tuple(int(c) for c in cells[1:])
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: class ids must be integers") from None
            if any(c < 0 for c in classes):
                raise DataFormatError(f"{path}:{lineno}: negative class id")
            if len(set(classes)) != len(classes):
                raise DataFormatError(f"{path}:{lineno}: ranking repeats a class")
            rankings[image_id] = classes
    if not rankings:
        raise DataFormatError(f"{path}:1: no rankings found")
    return rankings
