#!/usr/bin/env python3
"""
deform_conv.py - Modulated deformable convolution (offsets + mask)

Two convolution runs per call: regular 3x3 convs predict, for every
output location and kernel tap, a (dy, dx) sampling offset and a
sigmoid-gated modulation mask; the main kernel then samples the input
bilinearly at grid + offset, scales by the mask, and sums.

Offset channel layout: tap k = i * kw + j owns channels 2k (dy) and
2k + 1 (dx). Offsets are shared across input channels (one deformable
group). Out-of-bounds samples read zero.
"""

from typing import Any, Dict, Optional, Tuple

import numpy as np

from layers import Module, uniform_fan_in
from tensor_core import (
    DTYPE,
    AXES,
    ContractViolation,
    as_tensor4,
    bilinear_gather,
    bilinear_sample,
    bilinear_scatter,
    check_finite,
    conv2d_backward,
    conv2d_forward,
    conv2d_forward_naive,
    sigmoid_backward,
    sigmoid_forward,
)

GRAD_KEYS = ("input", "weight", "bias", "offset_weight", "offset_bias", "mask_weight", "mask_bias")


class DeformConvLayer(Module):
    def __init__(self, in_channels: int, out_channels: int,
                 rng: Optional[np.random.Generator] = None, kernel: Tuple[int, int] = (3, 3)):
        super().__init__()
        kh, kw = kernel
        if kh % 2 == 0 or kw % 2 == 0:
            raise ContractViolation(f"DeformConvLayer: kernel must be odd, got {kernel}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = (kh, kw)
        taps = kh * kw
        rng = rng if rng is not None else np.random.default_rng(0)
        self.add_param("weight", uniform_fan_in(rng, (out_channels, in_channels, kh, kw)))
        self.add_param("bias", np.zeros(out_channels))
        # predictors start at zero: no offset, mask = sigmoid(0) = 0.5
        self.add_param("offset_weight", np.zeros((2 * taps, in_channels, kh, kw)))
        self.add_param("offset_bias", np.zeros(2 * taps))
        self.add_param("mask_weight", np.zeros((taps, in_channels, kh, kw)))
        self.add_param("mask_bias", np.zeros(taps))
        self._x = None
        self._cache = None

    @property
    def taps(self) -> int:
        return self.kernel[0] * self.kernel[1]

    def sampling_offsets(self, x: np.ndarray) -> np.ndarray:
        return conv2d_forward(x, None, self.params["offset_weight"], self.params["offset_bias"])

    def modulation_mask(self, x: np.ndarray) -> np.ndarray:
        return sigmoid_forward(conv2d_forward(x, None, self.params["mask_weight"], self.params["mask_bias"]))

    def forward(self, x):
        self._x = x
        out, self._cache = deform_conv_forward(x, self, return_cache=True)
        return out

    def backward(self, grad_output):
        grads = deform_conv_backward(self._x, self, grad_output, cache=self._cache)
        for k in GRAD_KEYS[1:]:
            self.grads[k] += grads[k]
        return grads["input"]


def _tap_grid(layer: DeformConvLayer, h: int, w: int) -> Tuple[np.ndarray, np.ndarray]:
    """Nominal sampling positions, shape (K, H, W) each."""
    kh, kw = layer.kernel
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    ti, tj = np.meshgrid(np.arange(kh) - ph, np.arange(kw) - pw, indexing="ij")
    base_y = np.arange(h, dtype=DTYPE)[None, :, None] + ti.reshape(-1, 1, 1)
    base_x = np.arange(w, dtype=DTYPE)[None, None, :] + tj.reshape(-1, 1, 1)
    return np.broadcast_to(base_y, (kh * kw, h, w)), np.broadcast_to(base_x, (kh * kw, h, w))


def _check_input(x, layer: DeformConvLayer) -> np.ndarray:
    x = as_tensor4(x)
    if x.shape[1] != layer.in_channels:
        raise ContractViolation(
            f"deform_conv: channels mismatch (got {x.shape[1]}, expected {layer.in_channels})")
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise ContractViolation(f"deform_conv: empty spatial dims {x.shape[2:]}")
    return x


def deform_conv_forward(x, layer: DeformConvLayer, return_cache: bool = False):
    x = _check_input(x, layer)
    b_n, c_n, h, w = x.shape
    k_n = layer.taps
    offsets = layer.sampling_offsets(x)
    mask = layer.modulation_mask(x)
    base_y, base_x = _tap_grid(layer, h, w)
    py = base_y[None] + offsets[:, 0::2]
    px = base_x[None] + offsets[:, 1::2]

    vals, dvy, dvx = bilinear_gather(x, py, px, with_grad=True)
    cols = (vals * mask[:, None]).reshape(b_n, c_n * k_n, h * w)
    wmat = layer.params["weight"].reshape(layer.out_channels, -1)
    out = np.matmul(wmat, cols) + layer.params["bias"][None, :, None]
    out = check_finite(out.reshape(b_n, layer.out_channels, h, w), "deform_conv_forward")
    if not return_cache:
        return out
    cache = {"py": py, "px": px, "vals": vals, "dvy": dvy, "dvx": dvx, "mask": mask, "cols": cols}
    return out, cache


def deform_conv_backward(x, layer: DeformConvLayer, grad_output,
                         cache: Optional[Dict[str, Any]] = None) -> Dict[str, np.ndarray]:
    """Gradients for the input and all three parameter groups (main kernel,
    offset predictor, mask predictor), keyed by GRAD_KEYS."""
    x = _check_input(x, layer)
    b_n, c_n, h, w = x.shape
    grad_output = as_tensor4(grad_output, "grad_output")
    for axis, got, want in zip(AXES, grad_output.shape, (b_n, layer.out_channels, h, w)):
        if got != want:
            raise ContractViolation(f"deform_conv_backward grad_output: {axis} mismatch (got {got}, expected {want})")
    if cache is None:
        _, cache = deform_conv_forward(x, layer, return_cache=True)

    k_n = layer.taps
    weight = layer.params["weight"]
    g = grad_output.reshape(b_n, layer.out_channels, h * w)
    grad_w = np.einsum("bon,bkn->ok", g, cache["cols"]).reshape(weight.shape)
    grad_b = g.sum(axis=(0, 2))

    gcols = np.matmul(weight.reshape(layer.out_channels, -1).T, g).reshape(b_n, c_n, k_n, h, w)
    mask = cache["mask"]
    grad_mask_logits = sigmoid_backward(mask, (gcols * cache["vals"]).sum(axis=1))
    gvals = gcols * mask[:, None]

    grad_offsets = np.empty((b_n, 2 * k_n, h, w), dtype=DTYPE)
    grad_offsets[:, 0::2] = (gvals * cache["dvy"]).sum(axis=1)
    grad_offsets[:, 1::2] = (gvals * cache["dvx"]).sum(axis=1)

    grad_x = bilinear_scatter(gvals, cache["py"], cache["px"], x.shape)
    gx_off, g_ow, g_ob = conv2d_backward(x, layer.params["offset_weight"], grad_offsets)
    gx_mask, g_mw, g_mb = conv2d_backward(x, layer.params["mask_weight"], grad_mask_logits)

    return {
        "input": grad_x + gx_off + gx_mask,
        "weight": grad_w,
        "bias": grad_b,
        "offset_weight": g_ow,
        "offset_bias": g_ob,
        "mask_weight": g_mw,
        "mask_bias": g_mb,
    }


def deform_conv_forward_naive(x, layer: DeformConvLayer) -> np.ndarray:
    """Per-output-pixel oracle: re-derives offsets and mask with the naive
    conv and samples one value at a time."""
    x = _check_input(x, layer)
    b_n, c_n, h, w = x.shape
    kh, kw = layer.kernel
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    p = layer.params
    offsets = conv2d_forward_naive(x, None, p["offset_weight"], p["offset_bias"])
    mask = sigmoid_forward(conv2d_forward_naive(x, None, p["mask_weight"], p["mask_bias"]))
    out = np.zeros((b_n, layer.out_channels, h, w), dtype=DTYPE)
    for b in range(b_n):
        for o in range(layer.out_channels):
            for y in range(h):
                for xx in range(w):
                    acc = p["bias"][o]
                    for c in range(c_n):
                        for i in range(kh):
                            for j in range(kw):
                                k = i * kw + j
                                sy = y + i - ph + offsets[b, 2 * k, y, xx]
                                sx = xx + j - pw + offsets[b, 2 * k + 1, y, xx]
                                acc += p["weight"][o, c, i, j] * mask[b, k, y, xx] * bilinear_sample(x, b, c, sy, sx)
                    out[b, o, y, xx] = acc
    return out
