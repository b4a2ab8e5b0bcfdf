"""Three-band maximum-reflectance BEV rasterization.

Each cell of the ground grid keeps, per height band, the largest corrected
reflectance ``1.3 * (rho + 0.1)`` among its returns, scaled to 8 bit.
Channel 0/1/2 hold the low/middle/high band and are written as R/G/B.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import config as _config
from .errors import DomainError, MalformedFile
from .kitti_io import check_cloud

# heights are compared after rounding to this many decimals (1 um) so that
# values such as -1.08 + 1.73 land on the 0.65 m edge instead of just below it
HEIGHT_DECIMALS = 6


@dataclass(frozen=True)
class GridConfig:
    x_range: tuple[float, float] = (0.0, 70.0)
    y_range: tuple[float, float] = (-40.0, 40.0)
    cell_size: float = 0.1
    sensor_height_offset: float = 1.73
    band_edges: tuple[float, float] = (0.65, 1.30)
    reflectance_bias: float = 0.1
    reflectance_gain: float = 1.3

    def __post_init__(self):
        object.__setattr__(self, "x_range", tuple(float(v) for v in self.x_range))
        object.__setattr__(self, "y_range", tuple(float(v) for v in self.y_range))
        object.__setattr__(self, "band_edges", tuple(float(v) for v in self.band_edges))
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")
        for lo, hi in (self.x_range, self.y_range):
            if not hi > lo:
                raise ValueError("ROI ranges must be increasing")
            n = (hi - lo) / self.cell_size
            if abs(n - round(n)) > 1e-6:
                raise ValueError(f"ROI extent {hi - lo} is not a whole number of {self.cell_size} m cells")
        if len(self.band_edges) != 2 or not self.band_edges[0] < self.band_edges[1]:
            raise ValueError("band_edges must be two strictly increasing heights")
        if self.reflectance_gain <= 0:
            raise ValueError("reflectance_gain must be positive")

    @property
    def width(self) -> int:
        return int(round((self.x_range[1] - self.x_range[0]) / self.cell_size))

    @property
    def height(self) -> int:
        return int(round((self.y_range[1] - self.y_range[0]) / self.cell_size))

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.height, self.width, 3)

    def to_text(self) -> str:
        return _config.to_text(self)

    @classmethod
    def from_text(cls, text: str) -> "GridConfig":
        return _config.from_text(cls, text)


@dataclass
class BevImage:
    pixels: np.ndarray  # (H, W, 3) uint8, row 0 at y_min
    grid: GridConfig

    def __post_init__(self):
        if self.pixels.shape != self.grid.shape or self.pixels.dtype != np.uint8:
            raise ValueError(f"pixels must be uint8 {self.grid.shape}, got {self.pixels.dtype} {self.pixels.shape}")

    def __eq__(self, other):
        return (
            isinstance(other, BevImage)
            and self.grid == other.grid
            and np.array_equal(self.pixels, other.pixels)
        )


def cell_of(x: float, y: float, grid: GridConfig = GridConfig()) -> tuple[int, int] | None:
    """Column/row of the cell holding ``(x, y)``, or None outside the ROI."""
    (x0, x1), (y0, y1) = grid.x_range, grid.y_range
    if not (x0 <= x < x1 and y0 <= y < y1):
        return None
    u = math.floor((x - x0) / grid.cell_size)
    v = math.floor((y - y0) / grid.cell_size)
    if u >= grid.width or v >= grid.height:
        return None
    return u, v


def band_of(z: float, grid: GridConfig = GridConfig()) -> int:
    """Height band 1, 2 or 3 for a sensor-frame ``z``."""
    h = float(np.round(z + grid.sensor_height_offset, HEIGHT_DECIMALS))
    lo, hi = grid.band_edges
    if h < lo:
        return 1
    if h < hi:
        return 2
    return 3


def corrected_reflectance(rho: float, grid: GridConfig = GridConfig()) -> float:
    if not 0.0 <= rho <= 1.0:
        raise DomainError(f"reflectance {rho} outside [0, 1]")
    return grid.reflectance_gain * (rho + grid.reflectance_bias)


def quantize(rho_corr):
    """8-bit value of a corrected reflectance: round(min(255, 255 * value))."""
    return np.rint(np.minimum(255.0, 255.0 * np.asarray(rho_corr, dtype=np.float64)))


def encode(cloud: np.ndarray, grid: GridConfig = GridConfig()) -> BevImage:
    pts = check_cloud(cloud)
    H, W = grid.height, grid.width
    flat = np.zeros(H * W * 3, dtype=np.uint8)
    if len(pts):
        p = pts.astype(np.float64)
        x, y, z, r = p[:, 0], p[:, 1], p[:, 2], p[:, 3]
        (x0, x1), (y0, y1) = grid.x_range, grid.y_range
        u = np.floor((x - x0) / grid.cell_size)
        v = np.floor((y - y0) / grid.cell_size)
        keep = (x >= x0) & (x < x1) & (y >= y0) & (y < y1) & (u < W) & (v < H)
        if keep.any():
            u, v, z, r = u[keep].astype(np.int64), v[keep].astype(np.int64), z[keep], r[keep]
            h = np.round(z + grid.sensor_height_offset, HEIGHT_DECIMALS)
            band = (h >= grid.band_edges[0]).astype(np.int64) + (h >= grid.band_edges[1])
            val = quantize(grid.reflectance_gain * (r + grid.reflectance_bias)).astype(np.uint8)
            np.maximum.at(flat, (v * W + u) * 3 + band, val)
    return BevImage(flat.reshape(H, W, 3), grid)


def render_png(img: BevImage, path: str | os.PathLike) -> None:
    Image.fromarray(img.pixels).save(path, format="PNG")


def read_png(path: str | os.PathLike, grid: GridConfig = GridConfig()) -> BevImage:
    with Image.open(path) as im:
        return BevImage(np.asarray(im.convert("RGB"), dtype=np.uint8).copy(), grid)


_BEV_MAGIC = b"BEVI"
_BEV_HEADER = struct.Struct("<4sIII")


def write_raw(img: BevImage, path: str | os.PathLike) -> None:
    """Raw tensor sidecar: magic, H, W, C as uint32 LE, then H*W*C bytes."""
    H, W, C = img.pixels.shape
    Path(path).write_bytes(_BEV_HEADER.pack(_BEV_MAGIC, H, W, C) + img.pixels.tobytes())


def read_raw(path: str | os.PathLike, grid: GridConfig = GridConfig()) -> BevImage:
    raw = Path(path).read_bytes()
    if len(raw) < _BEV_HEADER.size:
        raise MalformedFile(f"{path}: truncated header")
    magic, H, W, C = _BEV_HEADER.unpack_from(raw)
    if magic != _BEV_MAGIC:
        raise MalformedFile(f"{path}: bad magic {magic!r}")
    body = raw[_BEV_HEADER.size:]
    if len(body) != H * W * C:
        raise MalformedFile(f"{path}: expected {H * W * C} payload bytes, got {len(body)}")
    if (H, W, C) != grid.shape:
        raise MalformedFile(f"{path}: raster {H}x{W}x{C} does not match grid {grid.shape}")
    return BevImage(np.frombuffer(body, dtype=np.uint8).reshape(H, W, C).copy(), grid)
