"""File formats: binary PGM input, 17-digit CSV matrices, raw float64 dumps.

All text output uses UTF-8 with LF line endings and round-trip float
formatting (17 significant digits) so reruns produce byte-identical files.
The raw dump format is a 16-byte header -- magic ``PSLB``, u32 rows, u32
cols, 4 reserved zero bytes -- followed by row-major little-endian float64.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

__all__ = [
    "UnsupportedFormat",
    "DecodeError",
    "read_pgm",
    "format_float",
    "write_matrix_csv",
    "read_matrix_csv",
    "write_matrix_bin",
    "read_matrix_bin",
]

_MAGIC = b"PSLB"
_HEADER = struct.Struct("<4sII4x")  # magic, rows, cols, reserved padding


class UnsupportedFormat(ValueError):
    """Input file is not in a format this package reads."""


class DecodeError(ValueError):
    """Input file matched the expected format but its contents are malformed."""


def _pgm_tokens(data: bytes):
    """Yield whitespace-separated header tokens, skipping # comments."""
    pos = 0
    n = len(data)
    while pos < n:
        ch = data[pos : pos + 1]
        if ch.isspace():
            pos += 1
            continue
        if ch == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos : pos + 1].isspace():
            pos += 1
        yield data[start:pos], pos
    return


def read_pgm(path: str | Path) -> np.ndarray:
    """Read a binary (P5) PGM file into a float array scaled to [0, 1].

    Handles 8-bit and 16-bit (big-endian, per the netpbm convention) rasters.
    Raises :class:`UnsupportedFormat` for non-P5 inputs and
    :class:`DecodeError` for malformed or truncated files.
    """
    data = Path(path).read_bytes()
    if not data.startswith(b"P5"):
        raise UnsupportedFormat(f"{path}: expected binary PGM (magic P5)")
    tokens = _pgm_tokens(data)
    fields = []
    end = 2
    try:
        next(tokens)  # the P5 magic itself
        for _ in range(3):
            tok, end = next(tokens)
            fields.append(tok)
    except StopIteration:
        raise DecodeError(f"{path}: incomplete PGM header") from None
    try:
        width, height, maxval = (int(t) for t in fields)
    except ValueError:
        raise DecodeError(f"{path}: non-numeric PGM header fields {fields!r}") from None
    if width < 1 or height < 1:
        raise DecodeError(f"{path}: bad raster size {width}x{height}")
    if not (0 < maxval < 65536):
        raise DecodeError(f"{path}: maxval {maxval} outside (0, 65536)")
    raster = data[end + 1 :]  # exactly one whitespace byte after maxval
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = width * height * dtype.itemsize
    if len(raster) < need:
        raise DecodeError(f"{path}: raster truncated ({len(raster)} bytes, need {need})")
    pixels = np.frombuffer(raster[:need], dtype=dtype).reshape(height, width)
    return pixels.astype(float) / float(maxval)


def format_float(x: float) -> str:
    """Round-trip decimal rendering used in every CSV this package writes."""
    return format(float(x), ".17g")


def write_matrix_csv(path: str | Path, array: np.ndarray) -> None:
    """Write a 2-D array as plain CSV, one row per line, 17 significant digits."""
    a = np.asarray(array, dtype=float)
    if a.ndim != 2:
        raise ValueError("expected a 2-D array")
    lines = [",".join(format_float(v) for v in row) for row in a]
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("utf-8"))


def read_matrix_csv(path: str | Path) -> np.ndarray:
    txt = Path(path).read_text(encoding="utf-8")
    rows = [line.split(",") for line in txt.splitlines() if line]
    try:
        return np.array([[float(v) for v in row] for row in rows], dtype=float)
    except ValueError:
        raise DecodeError(f"{path}: non-numeric CSV cell") from None


def write_matrix_bin(path: str | Path, array: np.ndarray) -> None:
    """Write a 2-D float64 array in the PSLB raw format (see module docstring)."""
    a = np.ascontiguousarray(array, dtype="<f8")
    if a.ndim != 2:
        raise ValueError("expected a 2-D array")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, a.shape[0], a.shape[1]))
        fh.write(a.tobytes())


def read_matrix_bin(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise DecodeError(f"{path}: shorter than the 16-byte header")
    magic, rows, cols = _HEADER.unpack_from(data)
    if magic != _MAGIC:
        raise UnsupportedFormat(f"{path}: bad magic {magic!r}")
    need = _HEADER.size + rows * cols * 8
    if len(data) != need:
        raise DecodeError(f"{path}: payload is {len(data) - _HEADER.size} bytes, need {rows * cols * 8}")
    return np.frombuffer(data, dtype="<f8", offset=_HEADER.size).reshape(rows, cols).copy()
