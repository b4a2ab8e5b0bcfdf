"""Split-refine-fuse blocks: C3k2, area-attention ABlock, B-A2C2f and N-A2C2f.

Every block comes in two halves: ``*_params`` lists parameter names and
shapes under a prefix, ``*_forward`` evaluates the block from a flat weight
mapping using the same names. Passing a dict as ``trace`` records the
pre-fusion tensors (and attention maps) for structural checks.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from ..errors import ShapeMismatch
from .ops import concat, conv, softmax

Weights = Mapping[str, np.ndarray]
Shapes = dict[str, tuple[int, ...]]


def hidden_width(c_out: int, e: float = 0.5) -> int:
    return int(e * c_out)


def conv_params(prefix: str, c_in: int, c_out: int, k: int) -> Shapes:
    return {f"{prefix}.w": (c_out, c_in, k, k), f"{prefix}.b": (c_out,)}


def _conv(x, weights: Weights, prefix: str, stride: int = 1, act: bool = True):
    return conv(x, weights[f"{prefix}.w"], weights[f"{prefix}.b"], stride=stride, act=act)


def _check_fusion(weights: Weights, prefix: str, expected_in: int) -> None:
    got = weights[f"{prefix}.w"].shape[1]
    if got != expected_in:
        raise ShapeMismatch(f"{prefix}: fusion conv takes {got} channels, block produces {expected_in}")


# -- residual bottleneck U(z) = z + conv3(conv3(z)) -------------------------

def bottleneck_params(prefix: str, c: int) -> Shapes:
    return {**conv_params(f"{prefix}.cv1", c, c, 3), **conv_params(f"{prefix}.cv2", c, c, 3)}


def bottleneck_forward(z: np.ndarray, weights: Weights, prefix: str) -> np.ndarray:
    return z + _conv(_conv(z, weights, f"{prefix}.cv1"), weights, f"{prefix}.cv2")


# -- C3k2 -------------------------------------------------------------------

def c3k2_params(prefix: str, c_in: int, c_out: int, e: float = 0.5) -> Shapes:
    ch = hidden_width(c_out, e)
    return {
        **conv_params(f"{prefix}.cv1", c_in, 2 * ch, 1),
        **bottleneck_params(f"{prefix}.m", ch),
        **conv_params(f"{prefix}.cv2", 3 * ch, c_out, 1),
    }


def c3k2_forward(x: np.ndarray, weights: Weights, prefix: str, trace: dict | None = None) -> np.ndarray:
    y = _conv(x, weights, f"{prefix}.cv1")
    ch = y.shape[0] // 2
    z1, z2 = y[:ch], y[ch:]
    cat = concat(z1, z2, bottleneck_forward(z2, weights, f"{prefix}.m"))
    _check_fusion(weights, f"{prefix}.cv2", 3 * ch)
    if trace is not None:
        trace["z1"], trace["z2"], trace["concat"] = z1, z2, cat
    return _conv(cat, weights, f"{prefix}.cv2")


# -- area attention and ABlock ---------------------------------------------

def area_attention(
    t: np.ndarray,
    weights: Weights,
    prefix: str,
    n_heads: int,
    n_areas: int,
    trace: dict | None = None,
) -> np.ndarray:
    """Multi-head self-attention restricted to horizontal row bands.

    The map is cut into ``n_areas`` bands of nearly equal height
    (``np.array_split`` semantics), so no padding tokens are introduced.
    """
    c, H, W = t.shape
    if c % n_heads:
        raise ShapeMismatch(f"{c} channels do not split into {n_heads} heads")
    d = c // n_heads
    qkv = _conv(t, weights, f"{prefix}.qkv", act=False)
    q, k, v = qkv[:c], qkv[c : 2 * c], qkv[2 * c :]
    out = np.empty_like(v)
    maps = []
    row = 0
    for rows in np.array_split(np.arange(H), min(n_areas, H)):
        h = len(rows)
        sl = slice(row, row + h)
        row += h
        qa = q[:, sl].reshape(n_heads, d, h * W)
        ka = k[:, sl].reshape(n_heads, d, h * W)
        va = v[:, sl].reshape(n_heads, d, h * W)
        logits = (qa.transpose(0, 2, 1) @ ka).astype(np.float64) / np.sqrt(d)
        attn = softmax(logits, axis=-1)
        out[:, sl] = (va @ attn.astype(np.float32).transpose(0, 2, 1)).reshape(c, h, W)
        maps.append(attn)
    if trace is not None:
        trace["attention"] = maps
    return _conv(out, weights, f"{prefix}.proj", act=False)


def ablock_params(prefix: str, c: int, rho: int = 2) -> Shapes:
    return {
        **conv_params(f"{prefix}.attn.qkv", c, 3 * c, 1),
        **conv_params(f"{prefix}.attn.proj", c, c, 1),
        **conv_params(f"{prefix}.ffn.cv1", c, rho * c, 1),
        **conv_params(f"{prefix}.ffn.cv2", rho * c, c, 1),
    }


def ablock_forward(
    t: np.ndarray,
    weights: Weights,
    prefix: str,
    n_heads: int = 4,
    n_areas: int = 4,
    trace: dict | None = None,
) -> np.ndarray:
    a = t + area_attention(t, weights, f"{prefix}.attn", n_heads, n_areas, trace)
    ffn = _conv(_conv(a, weights, f"{prefix}.ffn.cv1"), weights, f"{prefix}.ffn.cv2", act=False)
    return a + ffn


# -- B-A2C2f (attention refinement) ------------------------------------------

def b_a2c2f_params(prefix: str, c_in: int, c_out: int, e: float = 0.5, rho: int = 2) -> Shapes:
    ch = hidden_width(c_out, e)
    shapes = conv_params(f"{prefix}.cv1", c_in, ch, 1)
    for i in range(3):
        for j in range(2):
            shapes.update(ablock_params(f"{prefix}.m.{i}.{j}", ch, rho))
    shapes.update(conv_params(f"{prefix}.cv2", 4 * ch, c_out, 1))
    return shapes


def b_a2c2f_forward(
    x: np.ndarray,
    weights: Weights,
    prefix: str,
    n_heads: int = 4,
    n_areas: int = 4,
    trace: dict | None = None,
) -> np.ndarray:
    states = [_conv(x, weights, f"{prefix}.cv1")]
    for i in range(3):
        a = states[-1]
        for j in range(2):
            a = ablock_forward(a, weights, f"{prefix}.m.{i}.{j}", n_heads, n_areas)
        states.append(a)
    cat = concat(*states)
    _check_fusion(weights, f"{prefix}.cv2", 4 * states[0].shape[0])
    if trace is not None:
        trace["states"], trace["concat"] = states, cat
    return _conv(cat, weights, f"{prefix}.cv2")


# -- N-A2C2f (bottleneck refinement, used in the neck) -----------------------

def n_a2c2f_params(prefix: str, c_in: int, c_out: int, e: float = 0.5) -> Shapes:
    ch = hidden_width(c_out, e)
    return {
        **conv_params(f"{prefix}.cv1", c_in, ch, 1),
        **bottleneck_params(f"{prefix}.m.0", ch),
        **bottleneck_params(f"{prefix}.m.1", ch),
        **conv_params(f"{prefix}.cv2", 3 * ch, c_out, 1),
    }


def n_a2c2f_forward(x: np.ndarray, weights: Weights, prefix: str, trace: dict | None = None) -> np.ndarray:
    a0 = _conv(x, weights, f"{prefix}.cv1")
    a1 = bottleneck_forward(a0, weights, f"{prefix}.m.0")
    a2 = bottleneck_forward(a1, weights, f"{prefix}.m.1")
    cat = concat(a0, a1, a2)
    _check_fusion(weights, f"{prefix}.cv2", 3 * a0.shape[0])
    if trace is not None:
        trace["states"], trace["concat"] = [a0, a1, a2], cat
    return _conv(cat, weights, f"{prefix}.cv2")
