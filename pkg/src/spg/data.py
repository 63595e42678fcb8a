"""Synthetic shapes dataset: four classes told apart by geometry alone.

Every image is a textured noise background with one shape drawn over it in a
contrast-checked random color. The class is the shape (disk, rectangle,
triangle, ring), never the color, so a classifier has to look at form. Each
image is a pure function of (dataset seed, split, index); regenerating a
tree is byte-identical.

On disk a dataset is

    root/<split>/<image_id>.ppm     binary P6, maxval 255
    root/<split>/labels.csv         image_id,label
    root/<split>/boxes.csv          image_id,x0,y0,x1,y1 (val and test only)

Boxes are tight around the shape's pixel support, half-open, in pixel
coordinates. The train split carries no boxes: location is never supervised.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from spg.core import BBox, DataFormatError, resize_bilinear

SHAPES = ("disk", "rectangle", "triangle", "ring")
SPLITS = ("train", "val", "test")
_SPLIT_INDEX = {name: i for i, name in enumerate(SPLITS)}


@dataclass(frozen=True)
class DatasetSpec:
    image_hw: tuple[int, int] = (64, 64)
    num_classes: int = 4
    train: int = 2000
    val: int = 500
    test: int = 500
    seed: int = 0

    def validate(self) -> None:
        h, w = self.image_hw
        if h < 16 or w < 16:
            raise ValueError(f"images must be at least 16x16, got {self.image_hw}")
        if not 2 <= self.num_classes <= len(SHAPES):
            raise ValueError(f"num_classes must be in [2, {len(SHAPES)}]")
        if min(self.train, self.val, self.test) < 1:
            raise ValueError("every split needs at least one image")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")

    def count(self, split: str) -> int:
        return {"train": self.train, "val": self.val, "test": self.test}[split]


@dataclass
class ImageRecord:
    image_id: str
    pixels: np.ndarray  # float32, (H, W, 3), values in [0, 1]
    label: int
    box: BBox | None = None


def image_id_for(split: str, index: int) -> str:
    return f"{split}_{index:05d}"


# ---------------------------------------------------------------- rendering


def _pixel_centers(h: int, w: int):
    ys, xs = np.mgrid[0:h, 0:w]
    return xs + 0.5, ys + 0.5


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    coarse = rng.uniform(0.30, 0.70, size=(8, 8))
    lum = resize_bilinear(coarse, h, w)
    tint = rng.uniform(0.85, 1.0, size=3)
    fine = rng.uniform(-0.06, 0.06, size=(h, w, 3))
    return np.clip(lum[:, :, None] * tint[None, None, :] + fine, 0.0, 1.0)


def _shape_mask(rng: np.random.Generator, shape: str, h: int, w: int) -> np.ndarray:
    scale = min(h, w)
    cx, cy = _pixel_centers(h, w)

    def center(extent):
        lo, hi = extent + 2.0, None
        ox = rng.uniform(lo, w - extent - 2.0)
        oy = rng.uniform(lo, h - extent - 2.0)
        return ox, oy

    if shape == "disk":
        r = rng.uniform(0.125, 0.25) * scale
        ox, oy = center(r)
        return (cx - ox) ** 2 + (cy - oy) ** 2 <= r * r
    if shape == "rectangle":
        a = rng.uniform(0.11, 0.25) * scale
        b = rng.uniform(0.11, 0.25) * scale
        ox, oy = center(max(a, b))
        return (np.abs(cx - ox) <= a) & (np.abs(cy - oy) <= b)
    if shape == "triangle":
        s = rng.uniform(0.14, 0.25) * scale
        ox, oy = center(s)
        apex = (ox, oy - s)
        left = (ox - s, oy + s)
        right = (ox + s, oy + s)
        return _triangle_mask(cx, cy, apex, left, right)
    if shape == "ring":
        r_out = rng.uniform(0.16, 0.25) * scale
        r_in = r_out * rng.uniform(0.45, 0.60)
        ox, oy = center(r_out)
        d2 = (cx - ox) ** 2 + (cy - oy) ** 2
        return (d2 <= r_out * r_out) & (d2 >= r_in * r_in)
    raise ValueError(f"unknown shape {shape!r}")


def _triangle_mask(cx, cy, a, b, c) -> np.ndarray:
    def side(p, q):
        return (q[0] - p[0]) * (cy - p[1]) - (q[1] - p[1]) * (cx - p[0])

    s1, s2, s3 = side(a, b), side(b, c), side(c, a)
    return (s1 >= 0) & (s2 >= 0) & (s3 >= 0) | (s1 <= 0) & (s2 <= 0) & (s3 <= 0)


def _shape_color(rng: np.random.Generator, bg_lum: float) -> np.ndarray:
    for _ in range(32):
        color = rng.uniform(0.0, 1.0, size=3)
        lum = color @ (0.299, 0.587, 0.114)
        if abs(lum - bg_lum) >= 0.25:
            return color
    return np.zeros(3) if bg_lum >= 0.5 else np.ones(3)


def render_image(spec: DatasetSpec, split: str, index: int):
    """Pixels, label, and ground-truth box for one image, reproducibly."""
    if split not in _SPLIT_INDEX:
        raise ValueError(f"unknown split {split!r}")
    h, w = spec.image_hw
    seq = np.random.SeedSequence(entropy=spec.seed, spawn_key=(_SPLIT_INDEX[split], index))
    rng = np.random.default_rng(seq)
    label = index % spec.num_classes
    bg = _background(rng, h, w)
    mask = _shape_mask(rng, SHAPES[label], h, w)
    if not mask.any():
        raise RuntimeError(f"degenerate shape for {split}[{index}]")
    color = _shape_color(rng, float(bg[mask].mean(axis=0) @ (0.299, 0.587, 0.114)))
    jitter = rng.uniform(-0.05, 0.05, size=(int(mask.sum()), 3))
    pixels = bg.copy()
    pixels[mask] = np.clip(color[None, :] + jitter, 0.0, 1.0)
    rows, cols = np.nonzero(mask)
    box = BBox(float(cols.min()), float(rows.min()), float(cols.max() + 1), float(rows.max() + 1))
    return pixels.astype(np.float32), label, box


# ---------------------------------------------------------------- ppm io


def write_ppm(path, pixels: np.ndarray) -> None:
    """Binary P6 with maxval 255."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.dtype != np.uint8:
        raise ValueError(f"need uint8 (H, W, 3) pixels, got {pixels.dtype} {pixels.shape}")
    h, w = pixels.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(pixels).tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0

    def skip_space():
        nonlocal pos
        while pos < len(data):
            if data[pos : pos + 1].isspace():
                pos += 1
            elif data[pos : pos + 1] == b"#":
                while pos < len(data) and data[pos] != 0x0A:
                    pos += 1
            else:
                break

    def token(what):
        nonlocal pos
        skip_space()
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace() and data[pos] != 0x23:
            pos += 1
        if pos == start:
            raise DataFormatError(f"{path}: missing {what} at byte {start}")
        return data[start:pos]

    if token("magic") != b"P6":
        raise DataFormatError(f"{path}: not a binary P6 file")
    dims = []
    for what in ("width", "height", "maxval"):
        text = token(what)
        if not text.isdigit():
            raise DataFormatError(f"{path}: bad {what} {text!r}")
        dims.append(int(text))
    w, h, maxval = dims
    if w < 1 or h < 1:
        raise DataFormatError(f"{path}: bad dimensions {w}x{h}")
    if maxval != 255:
        raise DataFormatError(f"{path}: only maxval 255 is supported, got {maxval}")
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise DataFormatError(f"{path}: missing whitespace before pixel data")
    pos += 1
    need = w * h * 3
    payload = data[pos : pos + need]
    if len(payload) != need:
        raise DataFormatError(f"{path}: expected {need} pixel bytes, found {len(payload)}")
    if pos + need != len(data):
        raise DataFormatError(f"{path}: {len(data) - pos - need} trailing bytes")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).copy()


def quantize(pixels: np.ndarray) -> np.ndarray:
    """Float [0, 1] image to uint8 by round-half-away scaling."""
    arr = np.asarray(pixels, dtype=np.float64)
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("pixels must lie in [0, 1]")
    return np.clip(np.floor(arr * 255.0 + 0.5), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------- csv sidecars


def _write_csv(path, header: str, rows) -> None:
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")


def _read_csv(path, header: str) -> list[tuple[int, list[str]]]:
    ncols = header.count(",") + 1
    out = []
    with open(path) as fh:
        lines = fh.read().split("\n")
    if not lines or lines[0] != header:
        raise DataFormatError(f"{path}:1: expected header {header!r}")
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        cells = line.split(",")
        if len(cells) != ncols:
            raise DataFormatError(f"{path}:{lineno}: expected {ncols} columns, got {len(cells)}")
        out.append((lineno, cells))
    if not out:
        raise DataFormatError(f"{path}:1: no data rows")
    return out


def _fmt(v: float) -> str:
    return f"{v:g}"


# ---------------------------------------------------------------- datasets


def generate_dataset(spec: DatasetSpec, root) -> None:
    """Write the full tree for every split under root."""
    spec.validate()
    for split in SPLITS:
        split_dir = os.path.join(root, split)
        os.makedirs(split_dir, exist_ok=True)
        label_rows = []
        box_rows = []
        for i in range(spec.count(split)):
            image_id = image_id_for(split, i)
            pixels, label, box = render_image(spec, split, i)
            write_ppm(os.path.join(split_dir, image_id + ".ppm"), quantize(pixels))
            label_rows.append((image_id, str(label)))
            box_rows.append((image_id, _fmt(box.x0), _fmt(box.y0), _fmt(box.x1), _fmt(box.y1)))
        _write_csv(os.path.join(split_dir, "labels.csv"), "image_id,label", label_rows)
        if split != "train":
            _write_csv(os.path.join(split_dir, "boxes.csv"), "image_id,x0,y0,x1,y1", box_rows)


def load_dataset(root, split: str) -> list[ImageRecord]:
    """Records in labels.csv order; boxes attached when the split has them."""
    if split not in _SPLIT_INDEX:
        raise ValueError(f"unknown split {split!r}")
    split_dir = os.path.join(root, split)
    labels_path = os.path.join(split_dir, "labels.csv")
    if not os.path.exists(labels_path):
        raise DataFormatError(f"{labels_path}:1: file not found")
    labels: dict[str, int] = {}
    order = []
    for lineno, cells in _read_csv(labels_path, "image_id,label"):
        image_id, label_text = cells
        try:
            label = int(label_text)
        except ValueError:
            raise DataFormatError(f"{labels_path}:{lineno}: label must be an integer") from None
        if label < 0:
            raise DataFormatError(f"{labels_path}:{lineno}: negative label")
        if image_id in labels:
            raise DataFormatError(f"{labels_path}:{lineno}: duplicate image id {image_id!r}")
        labels[image_id] = label
        order.append(image_id)

    boxes: dict[str, BBox] = {}
    boxes_path = os.path.join(split_dir, "boxes.csv")
    if os.path.exists(boxes_path):
        for lineno, cells in _read_csv(boxes_path, "image_id,x0,y0,x1,y1"):
            image_id = cells[0]
            if image_id not in labels:
                raise DataFormatError(f"{boxes_path}:{lineno}: unknown image id {image_id!r}")
            if image_id in boxes:
                raise DataFormatError(f"{boxes_path}:{lineno}: duplicate image id {image_id!r}")
            try:
                coords = [float(c) for c in cells[1:]]
                boxes[image_id] = BBox(*coords)
            except ValueError as exc:
                raise DataFormatError(f"{boxes_path}:{lineno}: {exc}") from None
        missing = [i for i in order if i not in boxes]
        if missing:
            raise DataFormatError(f"{boxes_path}:1: no box for image {missing[0]!r}")

    records = []
    for image_id in order:
        ppm_path = os.path.join(split_dir, image_id + ".ppm")
        if not os.path.exists(ppm_path):
            raise DataFormatError(f"{ppm_path}: file not found")
        pixels = read_ppm(ppm_path).astype(np.float32) / 255.0
        records.append(
            ImageRecord(image_id, pixels, labels[image_id], boxes.get(image_id))
        )
    return records
