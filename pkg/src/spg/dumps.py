"""Single-map binary dumps for offline inspection.

Layout (magic "SPGM", version 1, little-endian):

    4s   magic b"SPGM"
    u32  format version
    u16  image id length, then that many utf-8 bytes
    u16  kind length, then that many utf-8 bytes
    u32  height
    u32  width
    then height * width float32 values, row major

Kinds: "attention", "B1", "B2", "C" carry score maps; "fused_mask" carries a
tri-state mask stored as 0.0 / 1.0 / 255.0.
"""

from __future__ import annotations

import struct

import numpy as np

from spg.core import DataFormatError, MASK_LABELS

SPGM_MAGIC = b"SPGM"
SPGM_VERSION = 1
MAP_KINDS = ("attention", "B1", "B2", "C", "fused_mask")


def write_map_dump(path, image_id: str, kind: str, map_) -> None:
    if kind not in MAP_KINDS:
        raise ValueError(f"kind must be one of {MAP_KINDS}, got {kind!r}")
    if not image_id:
        raise ValueError("image_id must be non-empty")
    arr = np.asarray(map_, dtype="<f4")
    if arr.ndim != 2 or arr.size == 0:
        raise ValueError(f"map must be non-empty 2-D, got shape {arr.shape}")
    if kind == "fused_mask":
        values = np.unique(arr)
        if not np.isin(values, MASK_LABELS).all():
            raise ValueError(f"fused_mask values must be 0, 1 or 255, got {values}")
    elif not np.isfinite(arr).all():
        raise ValueError("map contains non-finite values")
    id_bytes = image_id.encode()
    kind_bytes = kind.encode()
    with open(path, "wb") as fh:
        fh.write(SPGM_MAGIC)
        fh.write(struct.pack("<I", SPGM_VERSION))
        fh.write(struct.pack("<H", len(id_bytes)) + id_bytes)
        fh.write(struct.pack("<H", len(kind_bytes)) + kind_bytes)
        fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_map_dump(path):
    """Returns (image_id, kind, float32 array of shape (h, w))."""
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise DataFormatError(f"{path}: truncated, {what} missing at byte {pos}")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if take(4, "magic") != SPGM_MAGIC:
        raise DataFormatError(f"{path}: not a map dump (bad magic)")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != SPGM_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    (id_len,) = struct.unpack("<H", take(2, "id length"))
    image_id = take(id_len, "image id").decode()
    if not image_id:
        raise DataFormatError(f"{path}: empty image id")
    (kind_len,) = struct.unpack("<H", take(2, "kind length"))
    kind = take(kind_len, "kind").decode()
    if kind not in MAP_KINDS:
        raise DataFormatError(f"{path}: unknown map kind {kind!r}")
    h, w = struct.unpack("<II", take(8, "dimensions"))
    if h < 1 or w < 1:
        raise DataFormatError(f"{path}: bad dimensions {h}x{w}")
    payload = take(4 * h * w, "payload")
    if pos != len(data):
        raise DataFormatError(f"{path}: {len(data) - pos} trailing bytes")
    arr = np.frombuffer(payload, dtype="<f4").reshape(h, w).copy()
    if kind == "fused_mask":
        if not np.isin(np.unique(arr), MASK_LABELS).all():
            raise DataFormatError(f"{path}: fused_mask holds values outside 0/1/255")
    elif not np.isfinite(arr).all():
        raise DataFormatError(f"{path}: non-finite values in map")
    return image_id, kind, arr
