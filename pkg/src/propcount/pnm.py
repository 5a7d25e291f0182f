"""Binary PGM (P5) / PPM (P6) codec.

Pixels travel as float64 arrays in [0, 1]: (H, W) for PGM and
(H, W, 3) for PPM. 8-bit and 16-bit (big-endian) rasters are read;
writes are always 8-bit.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from propcount.models import DataError

_CHANNELS = {b"P5": 1, b"P6": 3}


def _header(data: bytes, path: Path) -> tuple[bytes, int, int, int, int]:
    """Parse magic, width, height, maxval; return them with the raster offset."""
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise DataError(f"{path}: truncated header")
        if data[pos:pos + 1] == b"#":
            end = data.find(b"\n", pos)
            pos = len(data) if end < 0 else end + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates maxval from the raster
    pos += 1

    magic = tokens[0]
    if magic not in _CHANNELS:
        raise DataError(f"{path}: unsupported format {magic!r} (need P5 or P6)")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as e:
        raise DataError(f"{path}: bad header values") from e
    if width <= 0 or height <= 0 or not 0 < maxval < 65536:
        raise DataError(f"{path}: bad header values {width}x{height} max {maxval}")
    return magic, width, height, maxval, pos


def read_pnm(path: str | Path) -> np.ndarray:
    """Read a binary PGM/PPM file into a float array in [0, 1]."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read image {path}: {e}") from e

    magic, width, height, maxval, offset = _header(data, path)
    channels = _CHANNELS[magic]
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height * channels
    raw = data[offset:]
    if len(raw) < count * dtype.itemsize:
        raise DataError(
            f"{path}: raster has {len(raw)} bytes, expected {count * dtype.itemsize}"
        )
    raster = np.frombuffer(raw, dtype=dtype, count=count)

    pixels = raster.astype(np.float64) / maxval
    if channels == 1:
        return pixels.reshape(height, width)
    return pixels.reshape(height, width, channels)


def to_bytes(pixels: np.ndarray) -> bytes:
    """Encode a [0, 1] array as 8-bit P5 (2-D) or P6 (H, W, 3)."""
    if pixels.ndim == 2:
        magic = b"P5"
    elif pixels.ndim == 3 and pixels.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot encode array of shape {pixels.shape}")
    height, width = pixels.shape[:2]
    raster = np.round(np.clip(pixels, 0.0, 1.0) * 255).astype(np.uint8)
    header = b"%s\n%d %d\n255\n" % (magic, width, height)
    return header + raster.tobytes()


def write_pnm(path: str | Path, pixels: np.ndarray) -> Path:
    """Write PGM or PPM depending on the array shape."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(pixels))
    return path


def to_rgb(pixels: np.ndarray) -> np.ndarray:
    """Broadcast a grayscale array to three channels (copy)."""
    if pixels.ndim == 2:
        return np.repeat(pixels[:, :, None], 3, axis=2)
    return pixels.copy()
