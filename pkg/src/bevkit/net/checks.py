"""Structural self-checks of the network, run by ``bevkit forward-check``."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import blocks
from .model import BevDetector, NetConfig, init_weights, parse_level
from .ops import conv

Check = tuple[str, bool, str]


def naive_conv(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1) -> np.ndarray:
    """Loop-based zero-padded cross-correlation without activation."""
    c_out, c_in, k, _ = w.shape
    p = k // 2
    _, H, W = x.shape
    Ho, Wo = (H + 2 * p - k) // stride + 1, (W + 2 * p - k) // stride + 1
    xp = np.pad(x.astype(np.float64), ((0, 0), (p, p), (p, p)))
    out = np.zeros((c_out, Ho, Wo))
    for o in range(c_out):
        for i in range(Ho):
            for j in range(Wo):
                patch = xp[:, i * stride : i * stride + k, j * stride : j * stride + k]
                out[o, i, j] = np.sum(patch * w[o]) + b[o]
    return out


def _random_weights(shapes, rng) -> dict[str, np.ndarray]:
    return {n: (rng.standard_normal(s) * 0.2).astype(np.float32) for n, s in shapes.items()}


def fusion_checks(c: int, e: float, rng) -> Iterator[Check]:
    ch = blocks.hidden_width(c, e)
    x = rng.standard_normal((c, 8, 8)).astype(np.float32)

    tr: dict = {}
    blocks.c3k2_forward(x, _random_weights(blocks.c3k2_params("b", c, c, e), rng), "b", tr)
    ok = tr["z1"].shape[0] == tr["z2"].shape[0] == ch and tr["concat"].shape[0] == 3 * ch
    yield "c3k2 split 2C_h / concat 3C_h", ok, f"C_h={ch}, concat={tr['concat'].shape[0]}"

    tr = {}
    blocks.b_a2c2f_forward(x, _random_weights(blocks.b_a2c2f_params("b", c, c, e), rng), "b", trace=tr)
    ok = tr["concat"].shape[0] == 4 * ch
    yield "b-a2c2f concat 4C_h", ok, f"C_h={ch}, concat={tr['concat'].shape[0]}"

    tr = {}
    blocks.n_a2c2f_forward(x, _random_weights(blocks.n_a2c2f_params("b", c, c, e), rng), "b", tr)
    ok = tr["concat"].shape[0] == 3 * ch
    yield "n-a2c2f concat 3C_h", ok, f"C_h={ch}, concat={tr['concat'].shape[0]}"


def residual_checks(c: int, rng) -> Iterator[Check]:
    z = rng.standard_normal((c, 8, 8)).astype(np.float32)
    zeros = {n: np.zeros(s, np.float32) for n, s in blocks.bottleneck_params("u", c).items()}
    err = float(np.abs(blocks.bottleneck_forward(z, zeros, "u") - z).max())
    yield "bottleneck identity at zero weights", err == 0.0, f"max |U(z) - z| = {err:g}"
    zeros = {n: np.zeros(s, np.float32) for n, s in blocks.ablock_params("a", c).items()}
    err = float(np.abs(blocks.ablock_forward(z, zeros, "a") - z).max())
    yield "ablock identity at zero weights", err == 0.0, f"max |A(T) - T| = {err:g}"


def attention_checks(c: int, n_heads: int, n_areas: int, rng) -> Iterator[Check]:
    t = rng.standard_normal((c, 10, 6)).astype(np.float32)
    tr: dict = {}
    w = _random_weights(blocks.ablock_params("a", c), rng)
    blocks.area_attention(t, w, "a.attn", n_heads, n_areas, tr)
    dev = max(float(np.abs(m.sum(axis=-1) - 1.0).max()) for m in tr["attention"])
    yield "attention rows sum to one", dev <= 1e-6, f"max deviation {dev:.2e}"


def conv_checks(rng) -> Iterator[Check]:
    for k, stride in ((1, 1), (3, 1), (3, 2)):
        x = rng.standard_normal((3, 9, 10)).astype(np.float32)
        w = rng.standard_normal((4, 3, k, k)).astype(np.float32)
        b = rng.standard_normal(4).astype(np.float32)
        err = float(np.abs(conv(x, w, b, stride, act=False) - naive_conv(x, w, b, stride)).max())
        yield f"conv k={k} s={stride} vs loop reference", err <= 1e-5, f"max error {err:.2e}"


def stride_checks(cfg: NetConfig, size: int, seed: int) -> Iterator[Check]:
    det = BevDetector(cfg, init_weights(cfg, seed))
    img = np.random.default_rng(seed).integers(0, 256, (size, size, 3), dtype=np.uint8)
    feats, _ = det.features(img)
    pad = -(-size // 32) * 32
    for name in cfg.head_levels:
        s = parse_level(name)[1]
        f = feats[name]
        ok = f.stride == s and f.data.shape[1:] == (pad // s, pad // s)
        yield f"head level {name} stride", ok, f"stride {f.stride}, map {f.data.shape[1:]}"


def check_structure(cfg: NetConfig, size: int = 64, seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    out: list[Check] = []
    out += fusion_checks(cfg.c_base, cfg.e, rng)
    out += residual_checks(cfg.c_base, rng)
    out += attention_checks(cfg.c_base, cfg.n_heads, cfg.n_areas, rng)
    out += conv_checks(rng)
    out += stride_checks(cfg, size, seed)
    return out
