"""Binary PGM (P5, maxval 255) image read/write.

Images travel through the package as float grids in [0, 1]; quantization
to 8 bits happens only at the file boundary, and generation quantizes
before use so that disk round-trips are exact.
"""

import numpy as np

from .errors import DataError


def write_pgm(path, pixels: np.ndarray) -> None:
    """Write a [0,1] float grid (or uint8 array) as binary PGM."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise DataError(f"PGM needs a 2-D grid, got shape {pixels.shape}")
    if pixels.dtype != np.uint8:
        pixels = quantize(pixels)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM into a [0,1] float64 grid."""
    with open(path, "rb") as fh:
        data = fh.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM (magic {fields[0]!r})")
    width, height, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise DataError(f"{path}: maxval must be 255, got {maxval}")
    pos += 1  # single whitespace after maxval
    raster = data[pos : pos + width * height]
    if len(raster) != width * height:
        raise DataError(f"{path}: truncated raster")
    grid = np.frombuffer(raster, dtype=np.uint8).reshape(height, width)
    return grid.astype(np.float64) / 255.0


def quantize(pixels: np.ndarray) -> np.ndarray:
    """Clip to [0,1] and round to the 8-bit lattice."""
    return np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
