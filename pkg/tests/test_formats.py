import struct

import numpy as np
import pytest

from amflow.formats import read_vtns, write_pgm, write_vtns


def test_vtns_round_trip_f32(tmp_path):
    rng = np.random.default_rng(0)
    arr = rng.standard_normal((3, 4, 5)).astype(np.float32)
    path = tmp_path / "t.vtns"
    write_vtns(path, arr)
    back = read_vtns(path)
    assert back.dtype == np.float32
    assert np.array_equal(back, arr)


def test_vtns_round_trip_f64(tmp_path):
    rng = np.random.default_rng(1)
    arr = rng.standard_normal((7,))
    path = tmp_path / "t.vtns"
    write_vtns(path, arr)
    back = read_vtns(path)
    assert back.dtype == np.float64
    assert np.array_equal(back, arr)


def test_vtns_round_trip_is_bit_exact(tmp_path):
    arr = np.array([[1.5, -0.0], [np.float32(1e-39), 3.0]], dtype=np.float32)
    path = tmp_path / "t.vtns"
    write_vtns(path, arr)
    first = path.read_bytes()
    write_vtns(path, read_vtns(path))
    assert path.read_bytes() == first


def test_vtns_header_layout(tmp_path):
    # golden bytes straight from the format definition
    arr = np.array([1.0, 2.0], dtype=np.float32)
    path = tmp_path / "t.vtns"
    write_vtns(path, arr)
    raw = path.read_bytes()
    expected = (b"VTNS" + struct.pack("<BBB5x", 1, 0, 1) + struct.pack("<Q", 2)
                + arr.astype("<f4").tobytes())
    assert raw == expected


def test_vtns_rejects_bad_magic(tmp_path):
    path = tmp_path / "t.vtns"
    path.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(ValueError, match="not a VTNS"):
        read_vtns(path)


def test_vtns_rejects_bad_version(tmp_path):
    path = tmp_path / "t.vtns"
    path.write_bytes(b"VTNS" + struct.pack("<BBB5x", 9, 0, 1) + struct.pack("<Q", 1) + bytes(4))
    with pytest.raises(ValueError, match="version"):
        read_vtns(path)


def test_vtns_rejects_truncated_payload(tmp_path):
    path = tmp_path / "t.vtns"
    write_vtns(path, np.zeros(4, dtype=np.float32))
    raw = path.read_bytes()
    path.write_bytes(raw[:-2])
    with pytest.raises(ValueError, match="payload"):
        read_vtns(path)


def test_vtns_rejects_integer_input(tmp_path):
    with pytest.raises(ValueError, match="f32/f64"):
        write_vtns(tmp_path / "t.vtns", np.arange(4))


def test_pgm_golden_bytes(tmp_path):
    frame = np.array([[-1.0, 1.0], [0.0, -1.0]])
    path = tmp_path / "f.pgm"
    write_pgm(path, frame)
    assert path.read_bytes() == b"P5\n2 2\n255\n" + bytes([0, 255, 127, 0])


def test_pgm_rejects_wrong_rank(tmp_path):
    with pytest.raises(ValueError, match="2-d"):
        write_pgm(tmp_path / "f.pgm", np.zeros((1, 2, 2)))
