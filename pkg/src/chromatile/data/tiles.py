"""Multispectral tiles and their binary file format.

A tile is an ordered map of band id -> (2-D float32 grid, resolution in
meters per pixel).  Bands may have different native extents; preparation
(see ``preprocess``) resamples them to a common extent.

File format (little-endian): magic "MSTL", version byte 0x01, u16 band
count; per band: u8 id length + UTF-8 id, u32 height, u32 width, f32
resolution_m, then height*width f32 samples row-major; trailing CRC32 of
all preceding bytes.  Grids round-trip bit-exactly.
"""

import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from chromatile.errors import DataError, UsageError

TILE_MAGIC = b"MSTL"
TILE_VERSION = 1


@dataclass
class Band:
    grid: np.ndarray
    resolution_m: float


@dataclass
class MultispectralTile:
    tile_id: str
    bands: "dict[str, Band]" = field(default_factory=dict)

    def __post_init__(self):
        for band_id, band in self.bands.items():
            grid = np.asarray(band.grid, dtype=np.float32)
            if grid.ndim != 2 or grid.size == 0:
                raise UsageError(
                    f"band {band_id!r} of tile {self.tile_id!r} must be a "
                    "non-empty 2-D grid"
                )
            band.grid = grid

    def band_ids(self):
        return list(self.bands)

    def band(self, band_id: str) -> Band:
        if band_id not in self.bands:
            raise DataError(f"tile {self.tile_id!r} has no band {band_id!r}")
        return self.bands[band_id]


def select_bands(tile: MultispectralTile, subset) -> MultispectralTile:
    """Restrict a tile to ``subset``, in subset order."""
    picked = {}
    for band_id in subset:
        if band_id in picked:
            raise UsageError(f"band {band_id!r} requested twice")
        band = tile.band(band_id)
        picked[band_id] = Band(band.grid, band.resolution_m)
    return MultispectralTile(tile.tile_id, picked)


def write_tile(path, tile: MultispectralTile) -> None:
    parts = [TILE_MAGIC, struct.pack("<B", TILE_VERSION)]
    parts.append(struct.pack("<H", len(tile.bands)))
    for band_id, band in tile.bands.items():
        encoded = band_id.encode("utf-8")
        if len(encoded) > 255:
            raise UsageError(f"band id {band_id!r} longer than 255 bytes")
        grid = np.ascontiguousarray(band.grid, dtype="<f4")
        h, w = grid.shape
        parts.append(struct.pack("<B", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<IIf", h, w, band.resolution_m))
        parts.append(grid.tobytes())
    payload = b"".join(parts)
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(struct.pack("<I", crc))


def read_tile(path) -> MultispectralTile:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read tile file {path}: {exc}") from None
    if len(raw) < len(TILE_MAGIC) + 1 + 2 + 4:
        raise DataError(f"tile file {path} is truncated")
    payload, crc_bytes = raw[:-4], raw[-4:]
    if payload[: len(TILE_MAGIC)] != TILE_MAGIC:
        raise DataError(f"tile file {path} has bad magic")
    (stored_crc,) = struct.unpack("<I", crc_bytes)
    if zlib.crc32(payload) & 0xFFFFFFFF != stored_crc:
        raise DataError(f"tile file {path} failed its checksum")

    offset = len(TILE_MAGIC)
    version = payload[offset]
    offset += 1
    if version != TILE_VERSION:
        raise DataError(f"tile file {path} has unsupported version {version}")

    def take(n):
        nonlocal offset
        if offset + n > len(payload):
            raise DataError(f"tile file {path} is truncated")
        chunk = payload[offset : offset + n]
        offset += n
        return chunk

    (band_count,) = struct.unpack("<H", take(2))
    bands = {}
    for _ in range(band_count):
        (id_len,) = struct.unpack("<B", take(1))
        band_id = take(id_len).decode("utf-8")
        h, w, resolution = struct.unpack("<IIf", take(12))
        grid = np.frombuffer(take(4 * h * w), dtype="<f4").reshape(h, w).copy()
        if band_id in bands:
            raise DataError(f"tile file {path} repeats band {band_id!r}")
        bands[band_id] = Band(grid, float(resolution))
    if offset != len(payload):
        raise DataError(f"tile file {path} has {len(payload) - offset} stray bytes")
    tile_id = os.path.splitext(os.path.basename(str(path)))[0]
    return MultispectralTile(tile_id, bands)
