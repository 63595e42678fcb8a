import struct

import numpy as np
import pytest

from spg.core import DataFormatError
from spg.dumps import MAP_KINDS, SPGM_MAGIC, read_map_dump, write_map_dump


def test_round_trip_is_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    arr = rng.standard_normal((5, 7)).astype(np.float32)
    path = tmp_path / "m.spgm"
    write_map_dump(path, "val_00003", "attention", arr)
    image_id, kind, back = read_map_dump(path)
    assert (image_id, kind) == ("val_00003", "attention")
    assert back.dtype == np.float32
    assert np.array_equal(back, arr)


def test_all_kinds_round_trip(tmp_path):
    for kind in MAP_KINDS:
        if kind == "fused_mask":
            arr = np.array([[0.0, 1.0], [255.0, 0.0]], dtype=np.float32)
        else:
            arr = np.full((2, 2), 0.25, dtype=np.float32)
        path = tmp_path / f"{kind}.spgm"
        write_map_dump(path, "x", kind, arr)
        _, back_kind, back = read_map_dump(path)
        assert back_kind == kind
        assert np.array_equal(back, arr)


def test_second_parser_agrees(tmp_path):
    """Direct struct-based reader, written independently of the library."""
    arr = np.arange(12, dtype=np.float32).reshape(3, 4) / 7.0
    path = tmp_path / "m.spgm"
    write_map_dump(path, "img9", "B2", arr)
    raw = path.read_bytes()
    assert raw[:4] == SPGM_MAGIC
    (version,) = struct.unpack_from("<I", raw, 4)
    (id_len,) = struct.unpack_from("<H", raw, 8)
    image_id = raw[10 : 10 + id_len].decode()
    off = 10 + id_len
    (kind_len,) = struct.unpack_from("<H", raw, off)
    kind = raw[off + 2 : off + 2 + kind_len].decode()
    off += 2 + kind_len
    h, w = struct.unpack_from("<II", raw, off)
    payload = np.frombuffer(raw[off + 8 :], dtype="<f4").reshape(h, w)
    assert version == 1
    assert (image_id, kind, h, w) == ("img9", "B2", 3, 4)
    assert np.array_equal(payload, arr)


def test_write_validation(tmp_path):
    path = tmp_path / "bad.spgm"
    with pytest.raises(ValueError, match="kind"):
        write_map_dump(path, "a", "warmth", np.zeros((2, 2)))
    with pytest.raises(ValueError, match="non-empty"):
        write_map_dump(path, "", "B1", np.zeros((2, 2)))
    with pytest.raises(ValueError, match="2-D"):
        write_map_dump(path, "a", "B1", np.zeros((2, 2, 2)))
    with pytest.raises(ValueError, match="fused_mask values"):
        write_map_dump(path, "a", "fused_mask", np.array([[0.5]]))
    with pytest.raises(ValueError, match="non-finite"):
        write_map_dump(path, "a", "B1", np.array([[np.nan]]))


def test_read_errors(tmp_path):
    good = tmp_path / "good.spgm"
    write_map_dump(good, "img", "C", np.zeros((2, 2), dtype=np.float32))
    raw = good.read_bytes()

    bad = tmp_path / "bad.spgm"
    bad.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(DataFormatError, match="magic"):
        read_map_dump(bad)

    bad.write_bytes(raw[:4] + struct.pack("<I", 9) + raw[8:])
    with pytest.raises(DataFormatError, match="version"):
        read_map_dump(bad)

    for cut in (3, 9, 12, len(raw) - 2):
        bad.write_bytes(raw[:cut])
        with pytest.raises(DataFormatError, match="truncated"):
            read_map_dump(bad)

    bad.write_bytes(raw + b"\x00")
    with pytest.raises(DataFormatError, match="trailing"):
        read_map_dump(bad)

    # Unknown kind in an otherwise valid file.
    evil = bytearray()
    evil += SPGM_MAGIC + struct.pack("<I", 1)
    evil += struct.pack("<H", 1) + b"a"
    evil += struct.pack("<H", 3) + b"zzz"
    evil += struct.pack("<II", 1, 1) + struct.pack("<f", 0.0)
    bad.write_bytes(bytes(evil))
    with pytest.raises(DataFormatError, match="unknown map kind"):
        read_map_dump(bad)

    # Mask kind with non-mask payload.
    evil = bytearray()
    evil += SPGM_MAGIC + struct.pack("<I", 1)
    evil += struct.pack("<H", 1) + b"a"
    evil += struct.pack("<H", 10) + b"fused_mask"
    evil += struct.pack("<II", 1, 1) + struct.pack("<f", 0.5)
    bad.write_bytes(bytes(evil))
    with pytest.raises(DataFormatError, match="fused_mask"):
        read_map_dump(bad)
