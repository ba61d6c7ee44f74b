#!/usr/bin/env python3
"""
bbox_head.py - Three-score-map bounding-box regression head

Pipeline:
  search tokens (B, H*W, D) -> reshape to (B, D, H, W)
  -> block body (plain | inception | deform_inception | deform_only)
  -> three independent branches, each ConvBlock 3x3 -> conv 1x1 -> sigmoid:
       center (B,1,H,W), size (B,2,H,W) = (w, h), offset (B,2,H,W) = (dx, dy)
  -> decode: argmax of the center map (first row-major on ties),
     cx = (x* + dx) / W, cy = (y* + dy) / H, (w, h) read at (y*, x*).

Checkpoints are tensor bundles (see tensor_core.save_tensor_bundle) whose
manifest meta carries the head config.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, field_validator

from head_blocks import BLOCK_ORDERS, ConvBlock, DeformInceptionBlock, InceptionBlock, plain_stack
from layers import ConvLayer, Module, Sequential
from tensor_core import (
    DTYPE,
    ContractViolation,
    ConvSpec,
    as_tensor4,
    load_tensor_bundle,
    save_tensor_bundle,
    sigmoid_backward,
    sigmoid_forward,
)

logger = logging.getLogger("boxhead")

HEAD_VARIANTS = ("plain", "inception", "deform_inception", "deform_only")
CHECKPOINT_KIND = "boxhead-checkpoint"
MIN_EXTENT = 1e-6


# ----------------------------- boxes -----------------------------

@dataclass(frozen=True)
class BBox:
    """Normalized (cx, cy, w, h) in [0, 1] search-region coordinates."""
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.w, self.h)
        if not all(np.isfinite(v) for v in vals):
            raise ContractViolation(f"BBox: non-finite field in {vals}")
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ContractViolation(f"BBox: centre ({self.cx}, {self.cy}) outside [0,1]")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise ContractViolation(f"BBox: size ({self.w}, {self.h}) outside (0,1]")

    def to_corners(self) -> Tuple[float, float, float, float]:
        """(x0, y0, x1, y1)."""
        return (self.cx - self.w / 2.0, self.cy - self.h / 2.0,
                self.cx + self.w / 2.0, self.cy + self.h / 2.0)

    @classmethod
    def from_corners(cls, x0: float, y0: float, x1: float, y1: float) -> "BBox":
        return cls((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)

    @classmethod
    def from_pixels(cls, x: float, y: float, w: float, h: float, img_w: int, img_h: int) -> "BBox":
        """Pixel (x, y, w, h) with top-left origin, clipped to the image."""
        if w <= 0 or h <= 0:
            raise ContractViolation(f"pixel box has non-positive size ({w}, {h})")
        x0, y0 = max(0.0, float(x)), max(0.0, float(y))
        x1, y1 = min(float(img_w), float(x) + w), min(float(img_h), float(y) + h)
        if x1 <= x0 or y1 <= y0:
            raise ContractViolation(f"pixel box ({x}, {y}, {w}, {h}) lies outside the {img_w}x{img_h} image")
        return cls((x0 + x1) / 2.0 / img_w, (y0 + y1) / 2.0 / img_h, (x1 - x0) / img_w, (y1 - y0) / img_h)

    def to_pixels(self, img_w: int, img_h: int) -> Tuple[float, float, float, float]:
        x0, y0, _, _ = self.to_corners()
        return (x0 * img_w, y0 * img_h, self.w * img_w, self.h * img_h)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=DTYPE)


def _corner_area(x0, y0, x1, y1) -> float:
    return max(0.0, x1 - x0) * max(0.0, y1 - y0)


def box_iou(a: BBox, b: BBox) -> float:
    """Areas come from the corner form, so identical boxes give exactly 1.0."""
    ax0, ay0, ax1, ay1 = a.to_corners()
    bx0, by0, bx1, by1 = b.to_corners()
    inter = _corner_area(max(ax0, bx0), max(ay0, by0), min(ax1, bx1), min(ay1, by1))
    union = _corner_area(ax0, ay0, ax1, ay1) + _corner_area(bx0, by0, bx1, by1) - inter
    if union <= 0.0:
        return 0.0
    return float(min(1.0, max(0.0, inter / union)))


# ----------------------------- config -----------------------------

class HeadConfig(BaseModel):
    variant: Literal["plain", "inception", "deform_inception", "deform_only"] = "inception"
    block_order: Literal["conv_relu_bn", "conv_bn_relu"] = "conv_relu_bn"
    embed_dim: int = 32
    map_h: int = 12
    map_w: int = 12
    depth: int = 1
    plain_depth: int = 1
    inception_width: Optional[int] = None
    deform_width: Optional[int] = None
    score_width: Optional[int] = None

    @field_validator("embed_dim", "map_h", "map_w", "depth")
    @classmethod
    def _positive(cls, v):
        if v < 1:
            raise ValueError("must be >= 1")
        return v

    @field_validator("plain_depth")
    @classmethod
    def _non_negative(cls, v):
        if v < 0:
            raise ValueError("must be >= 0")
        return v

    @field_validator("inception_width", "deform_width", "score_width")
    @classmethod
    def _optional_positive(cls, v):
        if v is not None and v < 1:
            raise ValueError("must be >= 1 when set")
        return v


# ----------------------------- score maps -----------------------------

@dataclass
class ScoreMaps:
    center: np.ndarray  # (B,1,H,W)
    size: np.ndarray    # (B,2,H,W) = (w, h)
    offset: np.ndarray  # (B,2,H,W) = (dx, dy)

    def __post_init__(self):
        for name, arr, ch in (("center", self.center, 1), ("size", self.size, 2), ("offset", self.offset, 2)):
            if arr.ndim != 4 or arr.shape[1] != ch:
                raise ContractViolation(f"ScoreMaps.{name}: expected (B,{ch},H,W), got {arr.shape}")
        ref = (self.center.shape[0],) + self.center.shape[2:]
        for name, arr in (("size", self.size), ("offset", self.offset)):
            if (arr.shape[0],) + arr.shape[2:] != ref:
                raise ContractViolation(f"ScoreMaps.{name}: (B,H,W) {arr.shape} disagrees with center {self.center.shape}")

    @property
    def batch(self) -> int:
        return self.center.shape[0]

    @property
    def grid(self) -> Tuple[int, int]:
        return self.center.shape[2], self.center.shape[3]

    @classmethod
    def zeros_like(cls, other: "ScoreMaps") -> "ScoreMaps":
        return cls(np.zeros_like(other.center), np.zeros_like(other.size), np.zeros_like(other.offset))


# ----------------------------- embedding reshape -----------------------------

def split_search_tokens(tokens: np.ndarray, n_template: int) -> np.ndarray:
    """Drop the leading template tokens; the head only sees the search region."""
    tokens = np.asarray(tokens, dtype=DTYPE)
    if tokens.ndim != 3:
        raise ContractViolation(f"tokens must be (B, N, D), got {tokens.shape}")
    if not 0 <= n_template <= tokens.shape[1]:
        raise ContractViolation(f"n_template={n_template} out of range for {tokens.shape[1]} tokens")
    return tokens[:, n_template:]


def reshape_embedding(tokens: np.ndarray, h: int, w: int) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=DTYPE)
    if tokens.ndim != 3:
        raise ContractViolation(f"tokens must be (B, H*W, D), got {tokens.shape}")
    b_n, n_tok, d = tokens.shape
    if n_tok != h * w:
        raise ContractViolation(f"token count {n_tok} does not match map {h}x{w}={h * w}")
    return np.ascontiguousarray(tokens.reshape(b_n, h, w, d).transpose(0, 3, 1, 2))


def unreshape_embedding(x: np.ndarray) -> np.ndarray:
    x = as_tensor4(x, "features")
    b_n, d, h, w = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1).reshape(b_n, h * w, d))


# ----------------------------- head -----------------------------

def _score_branch(d: int, width: int, n_out: int, order: str, rng) -> Sequential:
    return Sequential([ConvBlock(d, width, 3, order, rng), ConvLayer(ConvSpec(width, n_out, (1, 1)), rng)])


def build_body(config: HeadConfig, rng: np.random.Generator) -> Sequential:
    d, order = config.embed_dim, config.block_order
    if config.variant == "plain":
        return plain_stack(d, config.plain_depth, order, rng)
    if config.variant == "inception":
        return Sequential([InceptionBlock(d, config.inception_width, order, rng) for _ in range(config.depth)])
    include_regular = config.variant == "deform_inception"
    return Sequential([DeformInceptionBlock(d, config.deform_width, order, rng, include_regular=include_regular)
                       for _ in range(config.depth)])


class BoxHead(Module):
    def __init__(self, config: HeadConfig, rng: Optional[np.random.Generator] = None):
        super().__init__()
        if config.block_order not in BLOCK_ORDERS:
            raise ContractViolation(f"unknown block order {config.block_order!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = config
        d = config.embed_dim
        sw = config.score_width or d
        self.body = build_body(config, rng)
        self.center = _score_branch(d, sw, 1, config.block_order, rng)
        self.size = _score_branch(d, sw, 2, config.block_order, rng)
        self.offset = _score_branch(d, sw, 2, config.block_order, rng)
        self._maps: Optional[ScoreMaps] = None

    def children(self):
        return [("body", self.body), ("center", self.center), ("size", self.size), ("offset", self.offset)]

    def parameter_count(self) -> int:
        return int(sum(p.size for _, p in self.named_parameters()))

    def check_features(self, x) -> np.ndarray:
        x = as_tensor4(x, "features")
        cfg = self.config
        for axis, got, want in (("channels", x.shape[1], cfg.embed_dim),
                                ("height", x.shape[2], cfg.map_h),
                                ("width", x.shape[3], cfg.map_w)):
            if got != want:
                raise ContractViolation(f"head features: {axis} mismatch (got {got}, expected {want})")
        return x

    def forward(self, x) -> ScoreMaps:
        x = self.check_features(x)
        shared = self.body.forward(x)
        self._maps = ScoreMaps(
            sigmoid_forward(self.center.forward(shared)),
            sigmoid_forward(self.size.forward(shared)),
            sigmoid_forward(self.offset.forward(shared)),
        )
        return self._maps

    def backward(self, grad_maps: ScoreMaps) -> np.ndarray:
        if self._maps is None:
            raise ContractViolation("BoxHead.backward called before forward")
        maps = self._maps
        g_shared = self.center.backward(sigmoid_backward(maps.center, grad_maps.center))
        g_shared = g_shared + self.size.backward(sigmoid_backward(maps.size, grad_maps.size))
        g_shared = g_shared + self.offset.backward(sigmoid_backward(maps.offset, grad_maps.offset))
        return self.body.backward(g_shared)


def head_forward(features, config: HeadConfig, head: BoxHead) -> ScoreMaps:
    if head.config != config:
        raise ContractViolation(f"head was built for {head.config.model_dump()}, called with {config.model_dump()}")
    return head.forward(features)


def head_backward(head: BoxHead, grad_maps: ScoreMaps) -> np.ndarray:
    """Accumulates parameter gradients in the head; returns d loss / d features."""
    return head.backward(grad_maps)


# ----------------------------- decode / encode -----------------------------

def argmax_cell(center_map: np.ndarray) -> Tuple[int, int]:
    """Row-major first maximum of a (H, W) map."""
    flat = int(np.argmax(center_map))
    return divmod(flat, center_map.shape[1])


def decode_box(maps: ScoreMaps, batch_index: int = 0) -> BBox:
    if not 0 <= batch_index < maps.batch:
        raise ContractViolation(f"batch index {batch_index} out of range for batch {maps.batch}")
    h, w = maps.grid
    y, x = argmax_cell(maps.center[batch_index, 0])
    dx, dy = maps.offset[batch_index, 0, y, x], maps.offset[batch_index, 1, y, x]
    bw, bh = maps.size[batch_index, 0, y, x], maps.size[batch_index, 1, y, x]
    cx = min(1.0, max(0.0, (x + dx) / w))
    cy = min(1.0, max(0.0, (y + dy) / h))
    return BBox(float(cx), float(cy), float(min(1.0, max(MIN_EXTENT, bw))), float(min(1.0, max(MIN_EXTENT, bh))))


def decode_boxes(maps: ScoreMaps) -> List[BBox]:
    return [decode_box(maps, b) for b in range(maps.batch)]


def gaussian_sigma(box: BBox, h: int) -> float:
    return max(1.0, min(box.w, box.h) * h / 6.0)


def gaussian_center_target(cell: Tuple[int, int], h: int, w: int, sigma: float) -> np.ndarray:
    """(H, W) map with exactly 1.0 at `cell`, decaying as exp(-d^2 / 2 sigma^2)."""
    yy, xx = np.mgrid[0:h, 0:w]
    d2 = (yy - cell[0]) ** 2 + (xx - cell[1]) ** 2
    return np.exp(-d2 / (2.0 * sigma * sigma)).astype(DTYPE)


@dataclass(frozen=True)
class BoxTargets:
    cell: Tuple[int, int]   # (y, x)
    center: np.ndarray      # (H, W)
    size: Tuple[float, float]    # (w, h)
    offset: Tuple[float, float]  # (dx, dy)


def encode_box_targets(box: BBox, h: int, w: int) -> BoxTargets:
    x = min(int(np.floor(box.cx * w)), w - 1)
    y = min(int(np.floor(box.cy * h)), h - 1)
    dx, dy = box.cx * w - x, box.cy * h - y
    center = gaussian_center_target((y, x), h, w, gaussian_sigma(box, h))
    return BoxTargets((y, x), center, (box.w, box.h), (float(dx), float(dy)))


# ----------------------------- checkpoints -----------------------------

def save_checkpoint(path, head: BoxHead, extra_meta: Optional[Dict] = None) -> Path:
    meta = {"kind": CHECKPOINT_KIND, "head": head.config.model_dump()}
    if extra_meta:
        meta.update(extra_meta)
    out = save_tensor_bundle(path, head.state_dict(), meta)
    logger.info("[CKPT] wrote %s (%d parameters)", out, head.parameter_count())
    return out


def load_checkpoint(path, config: Optional[HeadConfig] = None) -> BoxHead:
    """Rebuild a head from a checkpoint. With `config`, the stored arrays must
    match the head that config describes; the first mismatching parameter is
    named in the error."""
    arrays, meta = load_tensor_bundle(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise ContractViolation(f"{path}: not a head checkpoint (kind={meta.get('kind')!r})")
    stored = HeadConfig(**meta.get("head", {}))
    head = BoxHead(config or stored, np.random.default_rng(0))
    head.load_state_dict(arrays)
    if config is not None and config != stored:
        want, got = config.model_dump(), stored.model_dump()
        field = next(k for k in want if want[k] != got.get(k))
        raise ContractViolation(f"checkpoint head config mismatch at {field!r}: stored {got.get(field)!r}, requested {want[field]!r}")
    logger.info("[CKPT] loaded %s (variant=%s)", path, head.config.variant)
    return head
