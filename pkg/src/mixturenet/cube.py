"""Spectral cube container, binary cube files, and image/CSV exports.

Cubes are (height, width, bands) float64 arrays, row-major with the band axis
fastest.  The on-disk format is little-endian and self-describing::

    bytes 0-3    magic "SPC1"
    bytes 4-15   three uint32: height, width, bands
    remainder    height*width*bands float64 payload, same memory order

Round-trips are bitwise exact.  All writers in this module go through a
temp-file-and-rename so readers never observe partial artifacts.
"""

from __future__ import annotations

import csv
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from PIL import Image

__all__ = [
    "SpectralCube",
    "CubeFormatError",
    "BadMagicError",
    "TruncatedPayloadError",
    "DimensionOverflowError",
    "read_cube",
    "write_cube",
    "export_band_png",
    "export_rgb_png",
    "export_csv",
    "atomic_write_bytes",
    "rgb_band_indices",
]

MAGIC = b"SPC1"
_HEADER = struct.Struct("<III")
# voxel count must stay representable in the header's unsigned 32-bit terms
_MAX_VOXELS = 2**32 - 1

# fractions of the band axis picked for the red, green, blue preview channels
_RGB_FRACTIONS = (5.0 / 6.0, 1.0 / 2.0, 1.0 / 6.0)


class CubeFormatError(ValueError):
    """Base class for malformed cube files."""


class BadMagicError(CubeFormatError):
    pass


class TruncatedPayloadError(CubeFormatError):
    pass


class DimensionOverflowError(CubeFormatError):
    pass


@dataclass
class SpectralCube:
    """A finite (height, width, bands) float64 array.

    Values are not clamped here; clipping to [0, 1] happens only when an
    optimizer result is exported, never while it is being produced.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float64)
        if arr.ndim != 3:
            raise ValueError(f"cube must be 3-D (height, width, bands), got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("cube entries must all be finite")
        self.data = arr

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def bands(self) -> int:
        return self.data.shape[2]


def atomic_write_bytes(path: Path | str, writer: Callable[[str], None]) -> None:
    """Run ``writer(tmp_path)`` then atomically rename onto ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), prefix=path.name, suffix=".tmp")
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_cube(path: Path | str, cube: SpectralCube) -> None:
    h, w, bands = cube.data.shape
    if h * w * bands > _MAX_VOXELS:
        raise DimensionOverflowError(f"cube of {h}x{w}x{bands} voxels exceeds the format limit")

    def writer(tmp: str) -> None:
        with open(tmp, "wb") as fh:
            fh.write(MAGIC)
            fh.write(_HEADER.pack(h, w, bands))
            fh.write(cube.data.astype("<f8", copy=False).tobytes(order="C"))

    atomic_write_bytes(path, writer)


def read_cube(path: Path | str) -> SpectralCube:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a cube file (magic {blob[:4]!r})")
    if len(blob) < 4 + _HEADER.size:
        raise TruncatedPayloadError(f"{path}: header cut short")
    h, w, bands = _HEADER.unpack_from(blob, 4)
    if h == 0 or w == 0 or bands == 0 or h * w * bands > _MAX_VOXELS:
        raise DimensionOverflowError(f"{path}: unusable dimensions {h}x{w}x{bands}")
    expected = h * w * bands * 8
    payload = blob[4 + _HEADER.size:]
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"{path}: payload holds {len(payload)} bytes, header promises {expected}"
        )
    data = np.frombuffer(payload[:expected], dtype="<f8").reshape(h, w, bands)
    return SpectralCube(data.copy())


# ---------------------------------------------------------------------------
# exports
# ---------------------------------------------------------------------------


def _to_uint8(band: np.ndarray) -> np.ndarray:
    """Min-max normalize one plane to 0..255; a constant plane maps to 0."""
    lo, hi = float(band.min()), float(band.max())
    if hi <= lo:
        return np.zeros(band.shape, dtype=np.uint8)
    return np.round((band - lo) / (hi - lo) * 255.0).astype(np.uint8)


def _save_png(image: Image.Image, path: Path | str) -> None:
    atomic_write_bytes(path, lambda tmp: image.save(tmp, format="PNG"))


def export_band_png(cube: SpectralCube, band: int, path: Path | str) -> None:
    """One band as an 8-bit grayscale PNG, min-max normalized."""
    if not 0 <= band < cube.bands:
        raise ValueError(f"band {band} out of range for {cube.bands} bands")
    _save_png(Image.fromarray(_to_uint8(cube.data[:, :, band]), mode="L"), path)


def rgb_band_indices(bands: int) -> tuple[int, int, int]:
    """Band picks for a false-color preview: floor(bands * fraction), clamped."""
    return tuple(min(int(bands * f), bands - 1) for f in _RGB_FRACTIONS)


def export_rgb_png(cube: SpectralCube, path: Path | str) -> None:
    """False-color RGB PNG from three picked bands, each normalized."""
    r, g, b = rgb_band_indices(cube.bands)
    stack = np.stack([_to_uint8(cube.data[:, :, i]) for i in (r, g, b)], axis=2)
    _save_png(Image.fromarray(stack, mode="RGB"), path)


def export_csv(array: np.ndarray, path: Path | str) -> None:
    """A 2-D array as CSV: comma separated, CRLF rows, '.' decimal point."""
    arr = np.asarray(array, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"export_csv expects a 2-D array, got shape {arr.shape}")

    def writer(tmp: str) -> None:
        with open(tmp, "w", newline="") as fh:
            out = csv.writer(fh, lineterminator="\r\n")
            for row in arr:
                out.writerow([repr(float(v)) for v in row])

    atomic_write_bytes(path, writer)
