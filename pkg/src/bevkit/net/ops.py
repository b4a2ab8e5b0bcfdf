"""Numpy tensor primitives for the forward-only network.

Feature maps are ``(C, H, W)`` float32 arrays; the batch axis is dropped.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeMismatch

_ACTIVATION = True


@contextlib.contextmanager
def activation_disabled():
    """Test hook: make every conv linear while the context is active."""
    global _ACTIVATION
    prev = _ACTIVATION
    _ACTIVATION = False
    try:
        yield
    finally:
        _ACTIVATION = prev


def silu(x: np.ndarray) -> np.ndarray:
    # x * sigmoid(x), written to avoid overflow in exp for large |x|
    return x * (0.5 * (1.0 + np.tanh(0.5 * x))).astype(x.dtype, copy=False)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class FeatureMap:
    data: np.ndarray  # (C, H, W)
    stride: int

    def __post_init__(self):
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ShapeMismatch(f"feature map must be C x H x W, got {self.data.shape}")
        if self.stride not in (1, 2, 4, 8, 16, 32):
            raise ShapeMismatch(f"unsupported stride {self.stride}")

    @property
    def channels(self) -> int:
        return self.data.shape[0]


def conv(
    x: np.ndarray,
    w: np.ndarray,
    b: np.ndarray | None = None,
    stride: int = 1,
    act: bool = True,
) -> np.ndarray:
    """2D cross-correlation with zero padding ``k // 2``, then SiLU.

    ``w`` has shape ``(C_out, C_in, k, k)``. Output spatial size is
    ``(H + 2p - k) // stride + 1`` which equals ``H / stride`` for even H.
    """
    if x.ndim != 3:
        raise ShapeMismatch(f"expected C x H x W input, got {x.shape}")
    c_out, c_in, kh, kw = w.shape
    if c_in != x.shape[0]:
        raise ShapeMismatch(f"weight expects {c_in} input channels, input has {x.shape[0]}")
    if kh != kw:
        raise ShapeMismatch("only square kernels are supported")
    k, p = kh, kh // 2
    _, H, W = x.shape
    Ho = (H + 2 * p - k) // stride + 1
    Wo = (W + 2 * p - k) // stride + 1
    x = x.astype(np.float32, copy=False)
    w = w.astype(np.float32, copy=False)
    if k == 1 and stride == 1:
        out = (w[:, :, 0, 0] @ x.reshape(c_in, -1)).reshape(c_out, H, W)
    else:
        # im2col: one GEMM of (C_out, C_in*k*k) x (C_in*k*k, Ho*Wo)
        xp = np.pad(x, ((0, 0), (p, p), (p, p))) if p else x
        win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :Ho, :Wo]
        cols = win.transpose(0, 3, 4, 1, 2).reshape(c_in * k * k, Ho * Wo)
        out = (w.reshape(c_out, -1) @ cols).reshape(c_out, Ho, Wo)
    if b is not None:
        out += b.astype(np.float32, copy=False)[:, None, None]
    if act and _ACTIVATION:
        out = silu(out)
    return out


def upsample2x(x: np.ndarray) -> np.ndarray:
    """Nearest-neighbour 2x upsampling of a (C, H, W) map."""
    return x.repeat(2, axis=1).repeat(2, axis=2)


def concat(*maps: np.ndarray) -> np.ndarray:
    shapes = {m.shape[1:] for m in maps}
    if len(shapes) != 1:
        raise ShapeMismatch(f"cannot concatenate maps with spatial shapes {sorted(shapes)}")
    return np.concatenate(maps, axis=0)
