import struct

import numpy as np
import pytest

from lowdose.io_utils import (
    DecodeError,
    UnsupportedFormat,
    format_float,
    read_matrix_bin,
    read_matrix_csv,
    read_pgm,
    write_matrix_bin,
    write_matrix_csv,
)


def _pgm8(width, height, maxval, raster, header_extra=b""):
    return b"P5" + header_extra + b" %d %d %d\n" % (width, height, maxval) + raster


def test_read_pgm_8bit(tmp_path):
    raster = bytes(range(12))
    path = tmp_path / "img.pgm"
    path.write_bytes(_pgm8(4, 3, 255, raster))
    img = read_pgm(path)
    assert img.shape == (3, 4)
    assert np.array_equal(img, np.arange(12).reshape(3, 4) / 255.0)


def test_read_pgm_comments_and_whitespace(tmp_path):
    data = b"P5 # trailing comment\n# full line\n  4\t2 \n# one more\n255\n" + bytes(8)
    path = tmp_path / "c.pgm"
    path.write_bytes(data)
    img = read_pgm(path)
    assert img.shape == (2, 4)
    assert np.all(img == 0.0)


def test_read_pgm_16bit_big_endian(tmp_path):
    values = np.array([[0, 1000], [65535, 256]], dtype=">u2")
    path = tmp_path / "img16.pgm"
    path.write_bytes(b"P5 2 2 65535\n" + values.tobytes())
    img = read_pgm(path)
    assert np.array_equal(img, values.astype(float) / 65535.0)


def test_read_pgm_binary_raster_with_whitespace_bytes(tmp_path):
    # raster bytes that look like ASCII whitespace must not be eaten
    raster = b"\n\t \r" + bytes([7, 8])
    path = tmp_path / "ws.pgm"
    path.write_bytes(_pgm8(3, 2, 255, raster))
    img = read_pgm(path)
    assert img.shape == (2, 3)
    assert img[0, 0] == ord("\n") / 255.0


def test_read_pgm_rejects_other_formats(tmp_path):
    path = tmp_path / "ascii.pgm"
    path.write_bytes(b"P2\n2 2\n255\n0 1 2 3\n")
    with pytest.raises(UnsupportedFormat):
        read_pgm(path)


def test_read_pgm_malformed(tmp_path):
    cases = (
        b"P5 4 3 255\n" + bytes(5),  # truncated raster
        b"P5 4 3\n",  # incomplete header
        b"P5 four 3 255\n" + bytes(12),  # non-numeric field
        b"P5 4 3 0\n" + bytes(12),  # maxval too small
        b"P5 4 3 70000\n" + bytes(24),  # maxval too large
        b"P5 0 3 255\n",  # empty raster dims
    )
    for i, data in enumerate(cases):
        path = tmp_path / f"bad{i}.pgm"
        path.write_bytes(data)
        with pytest.raises(DecodeError):
            read_pgm(path)


def test_format_float_round_trips():
    rng = np.random.default_rng(5)
    values = list(rng.standard_normal(50)) + [
        0.0,
        1.0,
        -1.5,
        1e-308,
        1e308,
        1.0 / 3.0,
        float(np.pi),
    ]
    for v in values:
        assert float(format_float(v)) == float(v)


def test_matrix_csv_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    a = rng.standard_normal((5, 7)) * 10.0 ** rng.integers(-8, 8, size=(5, 7))
    path = tmp_path / "m.csv"
    write_matrix_csv(path, a)
    b = read_matrix_csv(path)
    assert np.array_equal(a, b)
    raw = path.read_bytes()
    assert b"\r" not in raw and raw.endswith(b"\n")


def test_matrix_csv_errors(tmp_path):
    with pytest.raises(ValueError):
        write_matrix_csv(tmp_path / "x.csv", np.zeros(3))
    bad = tmp_path / "bad.csv"
    bad.write_text("1.0,2.0\n3.0,oops\n")
    with pytest.raises(DecodeError):
        read_matrix_csv(bad)


def test_matrix_bin_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    a = rng.standard_normal((4, 6))
    path = tmp_path / "m.bin"
    write_matrix_bin(path, a)
    b = read_matrix_bin(path)
    assert np.array_equal(a, b)
    raw = path.read_bytes()
    assert raw[:4] == b"PSLB"
    assert len(raw) == 16 + 4 * 6 * 8
    rows, cols = struct.unpack_from("<II", raw, 4)
    assert (rows, cols) == (4, 6)
    assert raw[12:16] == bytes(4)  # reserved padding stays zero


def test_matrix_bin_errors(tmp_path):
    short = tmp_path / "short.bin"
    short.write_bytes(b"PSLB\x01")
    with pytest.raises(DecodeError):
        read_matrix_bin(short)
    wrong = tmp_path / "wrong.bin"
    wrong.write_bytes(b"NOPE" + bytes(12) + bytes(8))
    with pytest.raises(UnsupportedFormat):
        read_matrix_bin(wrong)
    sized = tmp_path / "sized.bin"
    sized.write_bytes(struct.pack("<4sII4x", b"PSLB", 2, 2) + bytes(8))
    with pytest.raises(DecodeError):
        read_matrix_bin(sized)
    with pytest.raises(ValueError):
        write_matrix_bin(tmp_path / "x.bin", np.zeros(3))
