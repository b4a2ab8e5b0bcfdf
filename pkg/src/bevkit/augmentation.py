"""Channel-space augmentation: vertical re-binning plus an image-wide jitter."""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .bev_encoder import BevImage, GridConfig, encode

INFERENCE_OFFSETS = (-0.3, 0.0, 0.3)


@dataclass(frozen=True)
class AugmentParams:
    dz_range: tuple[float, float] = (-0.3, 0.3)
    sigma: float = 20.0
    rng_seed: int = 0

    def __post_init__(self):
        lo, hi = self.dz_range
        if not (lo <= hi and abs(lo + hi) < 1e-12):
            raise ValueError(f"dz_range must be a symmetric interval, got {self.dz_range}")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")


def rebin_shift(cloud: np.ndarray, dz: float) -> np.ndarray:
    """Copy of ``cloud`` with every z raised by ``dz`` (promoted to float64)."""
    out = np.array(cloud, dtype=np.float64, copy=True).reshape(-1, 4)
    out[:, 2] += dz
    return out


def jitter(img: BevImage, offset: float) -> BevImage:
    """Add one offset to every nonzero pixel channel, saturate to [0, 255], round once."""
    if not np.isfinite(offset):
        raise ValueError("jitter offset must be finite")
    px = img.pixels
    shifted = np.rint(np.clip(px.astype(np.float64) + offset, 0.0, 255.0)).astype(np.uint8)
    return BevImage(np.where(px > 0, shifted, np.uint8(0)), img.grid)


def frame_seed(global_seed: int, frame_id: str) -> np.random.SeedSequence:
    """Per-frame seed so regenerated datasets do not depend on processing order."""
    key = int(frame_id) if frame_id.isdigit() else zlib.crc32(frame_id.encode())
    return np.random.SeedSequence([int(global_seed) & 0xFFFFFFFFFFFFFFFF, key])


def draw_offsets(params: AugmentParams, rng: np.random.Generator) -> tuple[float, float]:
    dz = float(rng.uniform(*params.dz_range))
    jit = float(rng.normal(0.0, params.sigma))
    return dz, jit


def augment_frame(
    cloud: np.ndarray,
    params: AugmentParams = AugmentParams(),
    grid: GridConfig = GridConfig(),
    rng: np.random.Generator | None = None,
) -> BevImage:
    if rng is None:
        rng = np.random.default_rng(params.rng_seed)
    dz, jit = draw_offsets(params, rng)
    return jitter(encode(rebin_shift(cloud, dz), grid), jit)


def multi_offset_encode(
    cloud: np.ndarray,
    grid: GridConfig = GridConfig(),
    offsets: tuple[float, ...] = INFERENCE_OFFSETS,
) -> list[BevImage]:
    return [encode(rebin_shift(cloud, dz), grid) for dz in offsets]
