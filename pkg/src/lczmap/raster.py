"""Multi-band raster grids: RAWG v1 I/O, NDVI, block resampling and patch cutting."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from ._io import atomic_write_bytes, atomic_write_text, dump_json
from .errors import (
    GeometryMismatchError,
    MalformedRasterError,
    NodataContaminationError,
    OutOfBoundsError,
)

DEFAULT_NODATA = -9999.0
PATCH_SIZE = 32

_HEADER_KEYS = (
    "magic", "version", "width", "height", "bands", "pixel_size_m",
    "origin_x", "origin_y", "nodata", "dtype", "interleave",
)


@dataclass
class RasterGrid:
    """Georeferenced band-sequential float32 raster.

    ``data`` has shape ``(n_bands, height, width)``; C order of that array is
    exactly the band-sequential, row-major payload layout. ``origin_x`` and
    ``origin_y`` are the map coordinates of the top-left corner of pixel
    (0, 0); y decreases with increasing row.
    """

    data: np.ndarray
    pixel_size_m: float = 10.0
    origin_x: float = 0.0
    origin_y: float = 0.0
    nodata: float = DEFAULT_NODATA

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3:
            raise MalformedRasterError(f"raster data must be 3-D (bands, rows, cols), got {data.shape}")
        self.data = np.ascontiguousarray(data, dtype=np.float32)
        self.nodata = float(np.float32(self.nodata))
        if not self.pixel_size_m > 0:
            raise MalformedRasterError(f"pixel_size_m must be positive, got {self.pixel_size_m}")
        if min(self.data.shape) < 1:
            raise MalformedRasterError(f"empty raster {self.data.shape}")

    @property
    def n_bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def valid_mask(self) -> np.ndarray:
        """Per-band boolean mask of non-nodata cells."""
        return self.data != np.float32(self.nodata)

    def same_geometry(self, other: "RasterGrid") -> bool:
        return (
            self.width == other.width
            and self.height == other.height
            and self.pixel_size_m == other.pixel_size_m
            and self.origin_x == other.origin_x
            and self.origin_y == other.origin_y
        )

    def select_bands(self, bands) -> "RasterGrid":
        return self.with_data(self.data[list(bands)])

    def with_data(self, data: np.ndarray, **overrides) -> "RasterGrid":
        kw = dict(
            pixel_size_m=self.pixel_size_m,
            origin_x=self.origin_x,
            origin_y=self.origin_y,
            nodata=self.nodata,
        )
        kw.update(overrides)
        return RasterGrid(data, **kw)

    def check_finite(self) -> None:
        bad = ~np.isfinite(self.data) & self.valid_mask
        if bad.any():
            raise MalformedRasterError(f"{int(bad.sum())} non-finite cells that are not nodata")


@dataclass
class Patch:
    """A ``size x size x n_channels`` sample cut around a labelled point."""

    data: np.ndarray
    center_row: int
    center_col: int
    label: Optional[int] = None

    @property
    def size(self) -> int:
        return self.data.shape[-1]

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]


def payload_path(header_path) -> Path:
    return Path(header_path).with_suffix(".bin")


def raster_header(grid: RasterGrid) -> dict:
    return {
        "magic": "RAWG",
        "version": 1,
        "width": grid.width,
        "height": grid.height,
        "bands": grid.n_bands,
        "pixel_size_m": grid.pixel_size_m,
        "origin_x": grid.origin_x,
        "origin_y": grid.origin_y,
        "nodata": grid.nodata,
        "dtype": "f32le",
        "interleave": "bsq",
    }


def save_raster(grid: RasterGrid, header_path) -> None:
    """Write ``grid`` as a RAWG v1 JSON header plus a sibling ``.bin`` payload."""
    header_path = Path(header_path)
    atomic_write_bytes(payload_path(header_path), grid.data.astype("<f4").tobytes())
    atomic_write_text(header_path, dump_json(raster_header(grid)))


def load_raster(header_path) -> RasterGrid:
    header_path = Path(header_path)
    try:
        header = json.loads(header_path.read_text())
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MalformedRasterError(f"{header_path}: unreadable header ({exc})") from exc
    if not isinstance(header, dict) or header.get("magic") != "RAWG" or header.get("version") != 1:
        raise MalformedRasterError(f"{header_path}: not a RAWG v1 header")
    missing = [k for k in _HEADER_KEYS if k not in header]
    if missing:
        raise MalformedRasterError(f"{header_path}: header lacks {missing}")
    if header["dtype"] != "f32le" or header["interleave"] != "bsq":
        raise MalformedRasterError(f"{header_path}: unsupported dtype/interleave")
    w, h, b = (int(header[k]) for k in ("width", "height", "bands"))
    if min(w, h, b) < 1:
        raise MalformedRasterError(f"{header_path}: non-positive dimensions")
    raw = payload_path(header_path).read_bytes()
    expected = w * h * b * 4
    if len(raw) != expected:
        raise MalformedRasterError(
            f"{header_path}: payload has {len(raw)} bytes, header needs {expected}"
        )
    data = np.frombuffer(raw, dtype="<f4").reshape(b, h, w).astype(np.float32)
    grid = RasterGrid(
        data,
        pixel_size_m=float(header["pixel_size_m"]),
        origin_x=float(header["origin_x"]),
        origin_y=float(header["origin_y"]),
        nodata=float(header["nodata"]),
    )
    grid.check_finite()
    return grid


def compute_ndvi(grid: RasterGrid, nir_band: int = 3, red_band: int = 2) -> RasterGrid:
    """(NIR - Red) / (NIR + Red), clipped to [-1, 1].

    Cells where either input is nodata or NIR + Red == 0 become nodata. The
    clip only matters for negative reflectances.
    """
    for idx in (nir_band, red_band):
        if not 0 <= idx < grid.n_bands:
            raise IndexError(f"band index {idx} out of range for {grid.n_bands} bands")
    nir = grid.data[nir_band].astype(np.float64)
    red = grid.data[red_band].astype(np.float64)
    valid = grid.valid_mask[nir_band] & grid.valid_mask[red_band]
    denom = nir + red
    ok = valid & (denom != 0)
    out = np.full(nir.shape, grid.nodata, dtype=np.float64)
    out[ok] = np.clip((nir[ok] - red[ok]) / denom[ok], -1.0, 1.0)
    return grid.with_data(out[None].astype(np.float32))


def block_factor(source_size: float, target_size: float) -> int:
    ratio = target_size / source_size
    k = round(ratio)
    if k < 1 or not math.isclose(ratio, k, rel_tol=1e-9, abs_tol=1e-9):
        raise GeometryMismatchError(
            f"target pixel size {target_size} is not an integer multiple of {source_size}"
        )
    return int(k)


def resample_mean(grid: RasterGrid, target_pixel_size_m: float) -> RasterGrid:
    """Block-mean downsampling by an integer factor, ignoring nodata.

    Trailing rows/columns that do not fill a whole block are dropped.
    """
    k = block_factor(grid.pixel_size_m, target_pixel_size_m)
    if k == 1:
        return grid.with_data(grid.data.copy())
    hh, ww = grid.height // k, grid.width // k
    if hh == 0 or ww == 0:
        raise GeometryMismatchError(f"raster {grid.height}x{grid.width} smaller than block {k}")
    block = grid.data[:, : hh * k, : ww * k].reshape(grid.n_bands, hh, k, ww, k)
    valid = block != np.float32(grid.nodata)
    total = np.where(valid, block, 0).astype(np.float64).sum(axis=(2, 4))
    count = valid.sum(axis=(2, 4))
    out = np.full(total.shape, grid.nodata, dtype=np.float64)
    np.divide(total, count, out=out, where=count > 0)
    return grid.with_data(out.astype(np.float32), pixel_size_m=grid.pixel_size_m * k)


def window_bounds(center_row: int, center_col: int, size: int):
    """Half-open window ``[center - size/2, center + size/2)`` in both axes."""
    half = size // 2
    return center_row - half, center_row + half, center_col - half, center_col + half


def extract_patch(grid: RasterGrid, center_row: int, center_col: int, size: int = PATCH_SIZE) -> Patch:
    if size < 2 or size % 2:
        raise ValueError(f"patch size must be even and >= 2, got {size}")
    r0, r1, c0, c1 = window_bounds(center_row, center_col, size)
    if r0 < 0 or c0 < 0 or r1 > grid.height or c1 > grid.width:
        raise OutOfBoundsError(
            f"window rows [{r0},{r1}) cols [{c0},{c1}) exceeds {grid.height}x{grid.width} grid"
        )
    data = grid.data[:, r0:r1, c0:c1]
    if (data == np.float32(grid.nodata)).any():
        raise NodataContaminationError(f"nodata inside window centred at ({center_row},{center_col})")
    return Patch(data.copy(), int(center_row), int(center_col))


def map_point_to_pixel(grid: RasterGrid, x: float, y: float) -> tuple[int, int]:
    col = math.floor((x - grid.origin_x) / grid.pixel_size_m)
    row = math.floor((grid.origin_y - y) / grid.pixel_size_m)
    if not (0 <= row < grid.height and 0 <= col < grid.width):
        raise OutOfBoundsError(f"point ({x}, {y}) lies outside the raster extent")
    return row, col


def pixel_center(grid: RasterGrid, row: int, col: int) -> tuple[float, float]:
    """Map coordinates of the centre of pixel (row, col)."""
    return (
        grid.origin_x + (col + 0.5) * grid.pixel_size_m,
        grid.origin_y - (row + 0.5) * grid.pixel_size_m,
    )
