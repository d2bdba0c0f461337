"""PGM/PFM image file I/O.

Two formats cover every artifact the pipeline writes:

* images and binary masks: 8-bit grayscale PGM (``P5``, maxval 255), values
  scaled from [0, 1] so a {0, 1} mask lands on bytes {0, 255};
* float-valued maps (probabilities, uncertainties): grayscale PFM (``Pf``),
  little-endian (scale line ``-1.0``), rows stored bottom-to-top per the PFM
  convention. write → read is bit-exact for any finite 2-D float32 array.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import MalformedHeaderError, TruncatedPayloadError, UnsupportedMagicError
from .validation import check_2d

_PFM_SCALE = -1.0  # negative scale marks little-endian payloads


def _read_tokens(data: bytes, count: int, offset: int) -> tuple[list[bytes], int]:
    """Pull ``count`` whitespace-separated header tokens, skipping # comments."""
    tokens: list[bytes] = []
    i = offset
    n = len(data)
    while len(tokens) < count:
        while i < n and data[i : i + 1].isspace():
            i += 1
        if i < n and data[i : i + 1] == b"#":
            while i < n and data[i : i + 1] != b"\n":
                i += 1
            continue
        start = i
        while i < n and not data[i : i + 1].isspace():
            i += 1
        if i == start:
            raise MalformedHeaderError("header ended before all fields were read")
        tokens.append(data[start:i])
    return tokens, i


def write_pgm(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write a [0, 1]-valued 2-D array as an 8-bit P5 PGM."""
    arr = check_2d(image, "image")
    h, w = arr.shape
    payload = np.round(np.clip(np.asarray(arr, dtype=np.float64), 0.0, 1.0) * 255.0)
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload.astype(np.uint8).tobytes())


def write_pfm(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write a 2-D float array as a little-endian grayscale PFM."""
    arr = np.asarray(check_2d(image, "image"), dtype="<f4")
    h, w = arr.shape
    header = f"Pf\n{w} {h}\n{_PFM_SCALE}\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(header)
        f.write(arr[::-1].tobytes())  # bottom-to-top row order


def write_image(path: str | os.PathLike, image: np.ndarray) -> None:
    """Dispatch on extension: ``.pgm`` → PGM, ``.pfm`` → PFM."""
    p = os.fspath(path)
    if p.endswith(".pgm"):
        write_pgm(p, image)
    elif p.endswith(".pfm"):
        write_pfm(p, image)
    else:
        raise UnsupportedMagicError(f"unsupported image extension: {p}")


def read_image(path: str | os.PathLike) -> np.ndarray:
    """Read a PGM or PFM file into a float32 2-D array.

    PGM bytes come back divided by 255 so masks written from {0, 1} read back
    as {0, 1} exactly.
    """
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 2:
        raise UnsupportedMagicError(f"{path}: file too short for a magic number")
    magic = data[:2]
    if magic == b"P5":
        return _parse_pgm(data, str(path))
    if magic == b"Pf":
        return _parse_pfm(data, str(path))
    raise UnsupportedMagicError(f"{path}: unsupported magic {magic!r}")


def _parse_pgm(data: bytes, path: str) -> np.ndarray:
    tokens, i = _read_tokens(data, 4, 0)
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as exc:
        raise MalformedHeaderError(f"{path}: non-numeric PGM header field") from exc
    if w <= 0 or h <= 0:
        raise MalformedHeaderError(f"{path}: non-positive PGM dimensions {w}x{h}")
    if maxval != 255:
        raise MalformedHeaderError(f"{path}: PGM maxval must be 255, got {maxval}")
    payload = data[i + 1 : i + 1 + w * h]  # single whitespace byte after maxval
    if len(payload) < w * h:
        raise TruncatedPayloadError(
            f"{path}: truncated payload, expected {w * h} bytes, got {len(payload)}"
        )
    raster = np.frombuffer(payload, dtype=np.uint8, count=w * h).reshape(h, w)
    return (raster.astype(np.float32)) / np.float32(255.0)


def _parse_pfm(data: bytes, path: str) -> np.ndarray:
    tokens, i = _read_tokens(data, 4, 0)
    try:
        w, h = int(tokens[1]), int(tokens[2])
        scale = float(tokens[3])
    except ValueError as exc:
        raise MalformedHeaderError(f"{path}: non-numeric PFM header field") from exc
    if w <= 0 or h <= 0:
        raise MalformedHeaderError(f"{path}: non-positive PFM dimensions {w}x{h}")
    if scale == 0:
        raise MalformedHeaderError(f"{path}: PFM scale must be non-zero")
    dtype = "<f4" if scale < 0 else ">f4"
    nbytes = w * h * 4
    payload = data[i + 1 : i + 1 + nbytes]
    if len(payload) < nbytes:
        raise TruncatedPayloadError(
            f"{path}: truncated payload, expected {nbytes} bytes, got {len(payload)}"
        )
    raster = np.frombuffer(payload, dtype=dtype, count=w * h).reshape(h, w)
    return np.ascontiguousarray(raster[::-1], dtype=np.float32)
