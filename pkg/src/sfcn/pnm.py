"""Binary PGM (P5) and PPM (P6) reading and writing, 8-bit only."""

from __future__ import annotations

import os

import numpy as np


class PNMError(ValueError):
    pass


def _read_tokens(data: bytes, count: int):
    tokens = []
    pos = 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PNMError("truncated header")
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def read_pnm(path) -> np.ndarray:
    """Return a uint8 array, (h, w) for P5 or (h, w, 3) for P6."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, offset = _read_tokens(data, 4)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise PNMError(f"{path}: unsupported magic {magic!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise PNMError(f"{path}: malformed header") from exc
    if maxval != 255:
        raise PNMError(f"{path}: only 8-bit files are supported (maxval {maxval})")
    channels = 1 if magic == b"P5" else 3
    size = w * h * channels
    raster = data[offset:offset + size]
    if len(raster) != size:
        raise PNMError(f"{path}: raster truncated")
    arr = np.frombuffer(raster, dtype=np.uint8)
    return arr.reshape(h, w) if channels == 1 else arr.reshape(h, w, 3)


def write_pnm(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise PNMError("write_pnm expects uint8 data")
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise PNMError(f"cannot write array of shape {arr.shape}")
    h, w = arr.shape[:2]
    header = magic + b"\n%d %d\n255\n" % (w, h)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_gray(path) -> np.ndarray:
    """Read a single-channel 8-bit image.  PNG is accepted through Pillow."""
    if str(path).lower().endswith(".png"):
        from PIL import Image

        with Image.open(path) as im:
            if im.mode not in ("L", "P", "1"):
                raise PNMError(f"{path}: expected a single-channel image, got mode {im.mode}")
            return np.asarray(im.convert("L"), dtype=np.uint8)
    arr = read_pnm(path)
    if arr.ndim != 2:
        raise PNMError(f"{path}: expected a single-channel image")
    return arr


def to_uint8(values) -> np.ndarray:
    """Map [0, 1] floats to 0..255 with round-half-to-even."""
    return np.clip(np.rint(np.asarray(values) * 255.0), 0, 255).astype(np.uint8)
