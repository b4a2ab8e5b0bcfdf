"""Backbone, bidirectional neck and head wiring for the BEV detector.

Level names follow the feature they denote: ``P1..P5`` are backbone
outputs at stride ``2**i``; ``B<s>`` are top-down fused maps and ``D<s>``
bottom-up fused maps at stride ``s``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .. import config as _config
from ..bev_encoder import BevImage
from ..errors import ShapeMismatch, WeightMismatch
from . import blocks
from .head import DecodedDetection, head_decode
from .ops import FeatureMap, concat, conv, upsample2x

FULL_HEAD = ("B2", "D4", "D8", "D16")
BASELINE_HEAD = ("D32", "D16", "B8")
_LEVEL_RE = re.compile(r"^([BD])(\d+)$")


@dataclass(frozen=True)
class NetConfig:
    c_base: int = 32
    e: float = 0.5
    rho: int = 2
    n_heads: int = 4
    n_areas: int = 4
    head_levels: tuple[str, ...] = FULL_HEAD
    dfl_bins: int = 16
    n_classes: int = 3
    n_angle_bins: int = 16
    stage_blocks: tuple[str, ...] = ("c3k2", "c3k2", "c3k2", "a2c2f", "a2c2f")
    max_width: int = 512
    conf_thresh: float = 0.25
    max_candidates: int = 1000

    def __post_init__(self):
        object.__setattr__(self, "head_levels", tuple(self.head_levels))
        object.__setattr__(self, "stage_blocks", tuple(self.stage_blocks))
        if self.c_base not in (16, 32, 64):
            raise ValueError(f"c_base must be 16, 32 or 64, got {self.c_base}")
        if not self.head_levels:
            raise ValueError("head_levels must not be empty")
        if self.dfl_bins < 2:
            raise ValueError("dfl_bins must be at least 2")
        if len(self.stage_blocks) != 5 or set(self.stage_blocks) - {"c3k2", "a2c2f"}:
            raise ValueError("stage_blocks needs five entries from {'c3k2', 'a2c2f'}")
        parsed = [parse_level(n) for n in self.head_levels]
        finest = min(s for _, s in parsed)
        if ("B", finest) not in parsed:
            raise ValueError("the finest head level must be a top-down (B) map")
        for kind, s in parsed:
            if kind == "B" and s not in (2, 4, 8, 16):
                raise ValueError(f"no top-down map at stride {s}")
            if kind == "D" and not (finest < s <= 32):
                raise ValueError(f"bottom-up map D{s} must be coarser than B{finest}")

    def widths(self) -> list[int]:
        """Output width of P1..P5."""
        return [min(self.c_base * 2 ** i, self.max_width) for i in range(5)]

    def to_text(self) -> str:
        return _config.to_text(self)

    @classmethod
    def from_text(cls, text: str) -> "NetConfig":
        return _config.from_text(cls, text)


def parse_level(name: str) -> tuple[str, int]:
    m = _LEVEL_RE.match(name)
    if not m:
        raise ValueError(f"bad level name {name!r}")
    return m.group(1), int(m.group(2))


def _stride_index(stride: int) -> int:
    return stride.bit_length() - 1  # 2 -> 1, 4 -> 2, ...


def _neck_plan(cfg: NetConfig) -> tuple[list[int], list[int]]:
    """Strides of the top-down maps and of the bottom-up maps the head needs."""
    parsed = [parse_level(n) for n in cfg.head_levels]
    finest = min(s for _, s in parsed)
    top_down = [s for s in (16, 8, 4, 2) if s >= finest]
    d_max = max([s for k, s in parsed if k == "D"], default=finest)
    bottom_up = [s for s in (4, 8, 16, 32) if finest < s <= d_max]
    return top_down, bottom_up


def param_shapes(cfg: NetConfig) -> dict[str, tuple[int, ...]]:
    w = cfg.widths()
    shapes: dict[str, tuple[int, ...]] = {}
    c_prev = 3
    for i, kind in enumerate(cfg.stage_blocks):
        shapes.update(blocks.conv_params(f"backbone.{i + 1}.down", c_prev, w[i], 3))
        if kind == "c3k2":
            shapes.update(blocks.c3k2_params(f"backbone.{i + 1}.block", w[i], w[i], cfg.e))
        else:
            shapes.update(blocks.b_a2c2f_params(f"backbone.{i + 1}.block", w[i], w[i], cfg.e, cfg.rho))
        c_prev = w[i]
    top_down, bottom_up = _neck_plan(cfg)
    width_of = {f"P{i + 1}": w[i] for i in range(5)}
    seed = "P5"
    for s in top_down:
        lateral = f"P{_stride_index(s)}"
        c_out = width_of[lateral]
        shapes.update(blocks.n_a2c2f_params(f"neck.B{s}", width_of[seed] + width_of[lateral], c_out, cfg.e))
        width_of[f"B{s}"] = c_out
        seed = f"B{s}"
    prev = f"B{top_down[-1]}" if top_down else "P5"
    for s in bottom_up:
        lateral = f"B{s}" if s <= 16 else "P5"
        c_in = width_of[prev]
        shapes.update(blocks.conv_params(f"neck.D{s}.down", c_in, c_in, 3))
        c_out = width_of[lateral]
        shapes.update(blocks.n_a2c2f_params(f"neck.D{s}", c_in + width_of[lateral], c_out, cfg.e))
        width_of[f"D{s}"] = c_out
        prev = f"D{s}"
    for name in cfg.head_levels:
        shapes.update(head_params(f"head.{name}", width_of[name], cfg))
    return shapes


def head_params(prefix: str, c: int, cfg: NetConfig) -> dict[str, tuple[int, ...]]:
    return {
        **blocks.conv_params(f"{prefix}.box.cv1", c, c, 3),
        **blocks.conv_params(f"{prefix}.box.dfl", c, 4 * cfg.dfl_bins, 1),
        **blocks.conv_params(f"{prefix}.box.ang", c, cfg.n_angle_bins, 1),
        **blocks.conv_params(f"{prefix}.box.obj", c, 1, 1),
        **blocks.conv_params(f"{prefix}.cls.cv1", c, c, 3),
        **blocks.conv_params(f"{prefix}.cls.out", c, cfg.n_classes, 1),
    }


def parameter_count(cfg: NetConfig) -> int:
    return int(sum(np.prod(s) for s in param_shapes(cfg).values()))


# convs whose output is added onto a residual stream
_RESIDUAL_TAILS = (".attn.proj.w", ".ffn.cv2.w", ".m.cv2.w", ".m.0.cv2.w", ".m.1.cv2.w")
RESIDUAL_GAIN = 0.1


def init_weights(cfg: NetConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Kaiming-normal conv weights, zero biases, float32.

    Residual-branch output convs are scaled by ``RESIDUAL_GAIN`` so that
    stacked attention blocks keep activations bounded at random init.
    """
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in sorted(param_shapes(cfg).items()):
        if name.endswith(".b"):
            weights[name] = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:]))
            std = np.sqrt(2.0 / fan_in)
            if name.endswith(_RESIDUAL_TAILS):
                std *= RESIDUAL_GAIN
            weights[name] = (rng.standard_normal(shape) * std).astype(np.float32)
    return weights


def zero_weights(cfg: NetConfig) -> dict[str, np.ndarray]:
    return {n: np.zeros(s, dtype=np.float32) for n, s in param_shapes(cfg).items()}


def check_weights(cfg: NetConfig, weights: Mapping[str, np.ndarray]) -> None:
    expected = param_shapes(cfg)
    missing = sorted(set(expected) - set(weights))
    extra = sorted(set(weights) - set(expected))
    if missing or extra:
        raise WeightMismatch(f"missing {missing[:5]} / unexpected {extra[:5]} parameters")
    for name, shape in expected.items():
        if tuple(weights[name].shape) != tuple(shape):
            raise WeightMismatch(f"{name}: expected {shape}, got {tuple(weights[name].shape)}")


def image_tensor(img: BevImage | np.ndarray, multiple: int = 32) -> tuple[np.ndarray, tuple[int, int]]:
    """(H, W, 3) uint8 raster to a zero-padded (3, H', W') float32 tensor in [0, 1]."""
    px = img.pixels if isinstance(img, BevImage) else np.asarray(img)
    H, W = px.shape[:2]
    Hp, Wp = -(-H // multiple) * multiple, -(-W // multiple) * multiple
    x = np.zeros((3, Hp, Wp), dtype=np.float32)
    x[:, :H, :W] = px.transpose(2, 0, 1).astype(np.float32) / 255.0
    return x, (H, W)


def backbone_forward(x: np.ndarray, cfg: NetConfig, weights: Mapping[str, np.ndarray]) -> dict[str, FeatureMap]:
    if x.ndim != 3 or x.shape[0] != 3:
        raise ShapeMismatch(f"backbone expects a 3 x H x W tensor, got {x.shape}")
    if x.shape[1] % 32 or x.shape[2] % 32:
        raise ShapeMismatch(f"spatial size {x.shape[1:]} must be divisible by 32; pad first")
    feats = {}
    for i, kind in enumerate(cfg.stage_blocks):
        x = conv(x, weights[f"backbone.{i + 1}.down.w"], weights[f"backbone.{i + 1}.down.b"], stride=2)
        if kind == "c3k2":
            x = blocks.c3k2_forward(x, weights, f"backbone.{i + 1}.block")
        else:
            x = blocks.b_a2c2f_forward(x, weights, f"backbone.{i + 1}.block", cfg.n_heads, cfg.n_areas)
        feats[f"P{i + 1}"] = FeatureMap(x, 2 ** (i + 1))
    return feats


def neck_forward(
    P: Mapping[str, FeatureMap], cfg: NetConfig, weights: Mapping[str, np.ndarray]
) -> dict[str, FeatureMap]:
    """Top-down chain B16 -> ... -> B<finest>, then bottom-up D chain.

    Returns every fused map that was computed; the head picks
    ``cfg.head_levels`` out of it.
    """
    missing = [f"P{i}" for i in range(1, 6) if f"P{i}" not in P]
    if missing:
        raise ShapeMismatch(f"neck needs all backbone levels, missing {missing}")
    top_down, bottom_up = _neck_plan(cfg)
    maps: dict[str, FeatureMap] = {}
    seed = P["P5"]
    for s in top_down:
        lateral = P[f"P{_stride_index(s)}"]
        fused = blocks.n_a2c2f_forward(concat(upsample2x(seed.data), lateral.data), weights, f"neck.B{s}")
        seed = maps[f"B{s}"] = FeatureMap(fused, s)
    prev = seed
    for s in bottom_up:
        lateral = maps[f"B{s}"] if s <= 16 else P["P5"]
        down = conv(prev.data, weights[f"neck.D{s}.down.w"], weights[f"neck.D{s}.down.b"], stride=2)
        fused = blocks.n_a2c2f_forward(concat(down, lateral.data), weights, f"neck.D{s}")
        prev = maps[f"D{s}"] = FeatureMap(fused, s)
    return maps


def head_forward(
    F: Mapping[str, FeatureMap], cfg: NetConfig, weights: Mapping[str, np.ndarray]
) -> dict[str, dict[str, np.ndarray]]:
    outs = {}
    for name in cfg.head_levels:
        x, p = F[name].data, f"head.{name}"
        box = conv(x, weights[f"{p}.box.cv1.w"], weights[f"{p}.box.cv1.b"])
        cls = conv(x, weights[f"{p}.cls.cv1.w"], weights[f"{p}.cls.cv1.b"])
        dfl = conv(box, weights[f"{p}.box.dfl.w"], weights[f"{p}.box.dfl.b"], act=False)
        h, w = x.shape[1:]
        outs[name] = {
            "dfl": dfl.reshape(4, cfg.dfl_bins, h, w),
            "ang": conv(box, weights[f"{p}.box.ang.w"], weights[f"{p}.box.ang.b"], act=False),
            "obj": conv(box, weights[f"{p}.box.obj.w"], weights[f"{p}.box.obj.b"], act=False)[0],
            "cls": conv(cls, weights[f"{p}.cls.out.w"], weights[f"{p}.cls.out.b"], act=False),
        }
    return outs


class BevDetector:
    """Forward-only detector over externally supplied weights."""

    def __init__(self, cfg: NetConfig, weights: Mapping[str, np.ndarray]):
        check_weights(cfg, weights)
        self.cfg = cfg
        self.weights = {k: np.asarray(v, dtype=np.float32) for k, v in weights.items()}

    def features(self, img: BevImage | np.ndarray) -> tuple[dict[str, FeatureMap], tuple[int, int]]:
        x, hw = image_tensor(img)
        P = backbone_forward(x, self.cfg, self.weights)
        F = neck_forward(P, self.cfg, self.weights)
        return {n: F[n] for n in self.cfg.head_levels}, hw

    def detect(self, img: BevImage | np.ndarray) -> list[DecodedDetection]:
        F, hw = self.features(img)
        outs = head_forward(F, self.cfg, self.weights)
        strides = {n: F[n].stride for n in F}
        return head_decode(outs, strides, hw, self.cfg.conf_thresh, self.cfg.max_candidates)
