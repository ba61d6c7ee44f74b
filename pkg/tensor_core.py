#!/usr/bin/env python3
"""
tensor_core.py - Rank-4 tensor primitives for the box-regression heads

Every head in this repo is composed from the operations below. Tensors are
plain float64 numpy arrays in (B, C, H, W) layout; all convolutions use
stride 1 and same-padding so spatial dims survive end to end.

Two conv paths exist side by side:
- conv2d_forward_naive: seven nested loops, the correctness oracle
- conv2d_forward: im2col + one matmul, the path the heads actually use
"""

import json
import logging
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

DTYPE = np.float64

BUNDLE_MAGIC = b"BXHD"
BUNDLE_VERSION = 1


# ----------------------------- Errors -----------------------------

class BoxheadError(Exception):
    """Root of every error raised by this repo."""


class ContractViolation(BoxheadError, ValueError):
    """A precondition was broken: wrong dims, bad config, bad manifest."""


class AnnotationParseError(ContractViolation):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class NumericFailure(BoxheadError, ArithmeticError):
    """NaN/Inf appeared, or a numeric tolerance was exceeded."""


# ----------------------------- Tensor4 helpers -----------------------------

AXES = ("batch", "channels", "height", "width")


def as_tensor4(x, name: str = "input") -> np.ndarray:
    arr = np.asarray(x, dtype=DTYPE)
    if arr.ndim != 4:
        raise ContractViolation(f"{name}: expected rank-4 (B,C,H,W) tensor, got shape {arr.shape}")
    return arr


def zeros4(b: int, c: int, h: int, w: int) -> np.ndarray:
    return np.zeros((b, c, h, w), dtype=DTYPE)


def check_finite(x: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericFailure(f"{op}: produced non-finite values")
    return x


def _expect_axis(actual: int, expected: int, axis: str, what: str):
    if actual != expected:
        raise ContractViolation(f"{what}: {axis} mismatch (got {actual}, expected {expected})")


def intra_op_threads() -> int:
    """BOXHEAD_THREADS caps batch parallelism inside one kernel call (default 1)."""
    raw = os.environ.get("BOXHEAD_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        logging.getLogger("boxhead").warning("Ignoring invalid BOXHEAD_THREADS=%r", raw)
        return 1


def _map_batch(fn, batch: int):
    """Run fn(b0, b1) over batch slices; slices are disjoint so the result
    does not depend on the thread count."""
    threads = min(intra_op_threads(), batch)
    if threads <= 1:
        fn(0, batch)
        return
    bounds = np.linspace(0, batch, threads + 1).astype(int)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(fn, int(lo), int(hi)) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]
        for f in futures:
            f.result()


# ----------------------------- Conv spec -----------------------------

@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: Tuple[int, int] = (3, 3)

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ContractViolation(f"ConvSpec: channels must be positive, got {self.in_channels}->{self.out_channels}")
        kh, kw = self.kernel
        if kh < 1 or kw < 1 or kh % 2 == 0 or kw % 2 == 0:
            raise ContractViolation(f"ConvSpec: same-padding needs odd positive kernel, got {self.kernel}")

    @property
    def stride(self) -> int:
        return 1

    @property
    def padding(self) -> Tuple[int, int]:
        kh, kw = self.kernel
        return (kh - 1) // 2, (kw - 1) // 2

    @property
    def weight_shape(self) -> Tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels) + tuple(self.kernel)


def _validate_conv(x: np.ndarray, weights: np.ndarray, bias: np.ndarray, spec: Optional[ConvSpec]):
    x = as_tensor4(x)
    weights = as_tensor4(weights, "weights")
    bias = np.asarray(bias, dtype=DTYPE)
    if spec is None:
        spec = ConvSpec(weights.shape[1], weights.shape[0], weights.shape[2:4])
    _expect_axis(x.shape[1], spec.in_channels, "channels", "conv2d input")
    for axis, got, want in zip(AXES, weights.shape, spec.weight_shape):
        _expect_axis(got, want, axis, "conv2d weights")
    if bias.shape != (spec.out_channels,):
        raise ContractViolation(f"conv2d bias: expected shape ({spec.out_channels},), got {bias.shape}")
    return x, weights, bias, spec


# ----------------------------- im2col -----------------------------

def im2col_same(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(B,C,H,W) -> (B, C*kh*kw, H*W) patches under same-padding, stride 1."""
    b, c, h, w = x.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    sb, sc, sh, sw = xp.strides
    patches = np.lib.stride_tricks.as_strided(
        xp,
        shape=(b, c, kh, kw, h, w),
        strides=(sb, sc, sh, sw, sh, sw),
        writeable=False,
    )
    return patches.reshape(b, c * kh * kw, h * w)


def col2im_same(cols: np.ndarray, x_shape: Tuple[int, int, int, int], kh: int, kw: int) -> np.ndarray:
    """Adjoint of im2col_same: scatter-add columns back to an image."""
    b, c, h, w = x_shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    xp = np.zeros((b, c, h + 2 * ph, w + 2 * pw), dtype=DTYPE)
    cols = cols.reshape(b, c, kh, kw, h, w)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + h, j:j + w] += cols[:, :, i, j]
    return xp[:, :, ph:ph + h, pw:pw + w]


# ----------------------------- Convolution -----------------------------

def conv2d_forward(x, spec: Optional[ConvSpec], weights, bias) -> np.ndarray:
    x, weights, bias, spec = _validate_conv(x, weights, bias, spec)
    kh, kw = spec.kernel
    b, _, h, w = x.shape
    wmat = weights.reshape(spec.out_channels, -1)
    out = np.empty((b, spec.out_channels, h * w), dtype=DTYPE)

    def run(b0, b1):
        cols = im2col_same(x[b0:b1], kh, kw)
        np.matmul(wmat, cols, out=out[b0:b1])

    _map_batch(run, b)
    out += bias[None, :, None]
    return check_finite(out.reshape(b, spec.out_channels, h, w), "conv2d_forward")


def conv2d_forward_naive(x, spec: Optional[ConvSpec], weights, bias) -> np.ndarray:
    x, weights, bias, spec = _validate_conv(x, weights, bias, spec)
    kh, kw = spec.kernel
    ph, pw = spec.padding
    b_n, c_n, h_n, w_n = x.shape
    out = np.zeros((b_n, spec.out_channels, h_n, w_n), dtype=DTYPE)
    for b in range(b_n):
        for o in range(spec.out_channels):
            for y in range(h_n):
                for xx in range(w_n):
                    acc = bias[o]
                    for c in range(c_n):
                        for i in range(kh):
                            for j in range(kw):
                                yy, xi = y + i - ph, xx + j - pw
                                if 0 <= yy < h_n and 0 <= xi < w_n:
                                    acc += weights[o, c, i, j] * x[b, c, yy, xi]
                    out[b, o, y, xx] = acc
    return out


def conv2d_backward(x, weights, grad_output) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (input, weights, bias) of the same-padded stride-1 conv."""
    x = as_tensor4(x)
    weights = as_tensor4(weights, "weights")
    grad_output = as_tensor4(grad_output, "grad_output")
    o_n, c_n, kh, kw = weights.shape
    _expect_axis(x.shape[1], c_n, "channels", "conv2d_backward input")
    expected = (x.shape[0], o_n, x.shape[2], x.shape[3])
    for axis, got, want in zip(AXES, grad_output.shape, expected):
        _expect_axis(got, want, axis, "conv2d_backward grad_output")

    b_n, _, h, w = x.shape
    g = grad_output.reshape(b_n, o_n, h * w)
    cols = im2col_same(x, kh, kw)
    grad_w = np.einsum("bon,bkn->ok", g, cols).reshape(weights.shape)
    grad_b = g.sum(axis=(0, 2))
    grad_cols = np.matmul(weights.reshape(o_n, -1).T, g)
    grad_x = col2im_same(grad_cols, x.shape, kh, kw)
    return grad_x, grad_w, grad_b


# ----------------------------- Pooling / activations -----------------------------

def avg_pool3x3_same(x) -> np.ndarray:
    # divisor fixed at 9, padded cells count as zeros
    x = as_tensor4(x)
    h, w = x.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros_like(x)
    for i in range(3):
        for j in range(3):
            out += xp[:, :, i:i + h, j:j + w]
    return out / 9.0


def avg_pool3x3_backward(grad_output) -> np.ndarray:
    # the 3x3 box filter with zero padding is self-adjoint
    return avg_pool3x3_same(grad_output)


def relu_forward(x) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=DTYPE), 0.0)


def relu_backward(x, grad_output) -> np.ndarray:
    # subgradient at 0 is 0
    return np.where(np.asarray(x) > 0.0, grad_output, 0.0)


def sigmoid_forward(x) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=DTYPE)))


def sigmoid_backward(s, grad_output) -> np.ndarray:
    """s is the forward output."""
    return grad_output * s * (1.0 - s)


# ----------------------------- Batch norm -----------------------------

@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5
    momentum: float = 0.1
    mode: str = "train"

    @classmethod
    def fresh(cls, channels: int, epsilon: float = 1e-5, momentum: float = 0.1) -> "BatchNormState":
        return cls(
            gamma=np.ones(channels, dtype=DTYPE),
            beta=np.zeros(channels, dtype=DTYPE),
            running_mean=np.zeros(channels, dtype=DTYPE),
            running_var=np.ones(channels, dtype=DTYPE),
            epsilon=epsilon,
            momentum=momentum,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def batchnorm_forward(x, state: BatchNormState) -> Tuple[np.ndarray, Dict[str, Any]]:
    """Returns (output, cache). Train mode updates the running stats in place."""
    x = as_tensor4(x)
    _expect_axis(x.shape[1], state.channels, "channels", "batchnorm input")
    g = state.gamma[None, :, None, None]
    bt = state.beta[None, :, None, None]
    if state.mode == "eval":
        inv_std = 1.0 / np.sqrt(state.running_var + state.epsilon)
        xhat = (x - state.running_mean[None, :, None, None]) * inv_std[None, :, None, None]
        out = g * xhat + bt
        return check_finite(out, "batchnorm_forward"), {"mode": "eval", "xhat": xhat, "inv_std": inv_std}

    n = x.shape[0] * x.shape[2] * x.shape[3]
    if n < 2:
        raise ContractViolation(f"batchnorm_forward: train mode needs B*H*W >= 2, got {n}")
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    inv_std = 1.0 / np.sqrt(var + state.epsilon)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = g * xhat + bt

    m = state.momentum
    state.running_mean = (1.0 - m) * state.running_mean + m * mean
    # running variance tracks the unbiased estimate
    state.running_var = (1.0 - m) * state.running_var + m * var * (n / (n - 1))
    return check_finite(out, "batchnorm_forward"), {"mode": "train", "xhat": xhat, "inv_std": inv_std}


def batchnorm_backward(grad_output, state: BatchNormState, cache: Dict[str, Any]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (input, gamma, beta)."""
    grad_output = as_tensor4(grad_output, "grad_output")
    xhat = cache["xhat"]
    inv_std = cache["inv_std"][None, :, None, None]
    grad_gamma = (grad_output * xhat).sum(axis=(0, 2, 3))
    grad_beta = grad_output.sum(axis=(0, 2, 3))
    gxhat = grad_output * state.gamma[None, :, None, None]
    if cache["mode"] == "eval":
        return gxhat * inv_std, grad_gamma, grad_beta
    mean_g = gxhat.mean(axis=(0, 2, 3), keepdims=True)
    mean_gx = (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
    grad_x = inv_std * (gxhat - mean_g - xhat * mean_gx)
    return grad_x, grad_gamma, grad_beta


# ----------------------------- Concatenation -----------------------------

def concat_channels(inputs: Sequence[np.ndarray]) -> np.ndarray:
    if not inputs:
        raise ContractViolation("concat_channels: need at least one tensor")
    tensors = [as_tensor4(t, f"inputs[{i}]") for i, t in enumerate(inputs)]
    ref = tensors[0].shape
    for i, t in enumerate(tensors[1:], start=1):
        for axis in (0, 2, 3):
            _expect_axis(t.shape[axis], ref[axis], AXES[axis], f"concat_channels inputs[{i}]")
    return np.concatenate(tensors, axis=1)


def split_channels(grad_output: np.ndarray, sizes: Sequence[int]) -> List[np.ndarray]:
    """Backward of concat_channels: cut grad_output at the same channel boundaries."""
    grad_output = as_tensor4(grad_output, "grad_output")
    _expect_axis(grad_output.shape[1], int(sum(sizes)), "channels", "split_channels")
    bounds = np.cumsum(sizes)[:-1]
    return [np.ascontiguousarray(p) for p in np.split(grad_output, bounds, axis=1)]


# ----------------------------- Bilinear sampling -----------------------------

def _bilinear_corners(py: np.ndarray, px: np.ndarray, h: int, w: int):
    """Yield (yi, xi, weight, d_weight/dy, d_weight/dx) for the 4 neighbours.
    Samples outside (-1, H) x (-1, W) and out-of-range neighbours weigh 0."""
    y0 = np.floor(py)
    x0 = np.floor(px)
    ly = py - y0
    lx = px - x0
    inside = (py > -1) & (py < h) & (px > -1) & (px < w)
    y0i = y0.astype(np.int64)
    x0i = x0.astype(np.int64)
    for dy, wy, dwy in ((0, 1.0 - ly, -1.0), (1, ly, 1.0)):
        for dx, wx, dwx in ((0, 1.0 - lx, -1.0), (1, lx, 1.0)):
            yi = y0i + dy
            xi = x0i + dx
            valid = (inside & (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)).astype(DTYPE)
            yield (np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1),
                   wy * wx * valid, dwy * wx * valid, wy * dwx * valid)


def bilinear_sample(x, b: int, c: int, y: float, xx: float) -> float:
    x = as_tensor4(x)
    h, w = x.shape[2:]
    total = 0.0
    for yi, xi, wt, _, _ in _bilinear_corners(np.asarray(y, DTYPE), np.asarray(xx, DTYPE), h, w):
        total += float(wt) * x[b, c, int(yi), int(xi)]
    return total


def bilinear_sample_grad(x, b: int, c: int, y: float, xx: float):
    """Returns (input_weights, d_value/dy, d_value/dx); input_weights is a
    list of ((yi, xi), weight) pairs, the gradient w.r.t. input values."""
    x = as_tensor4(x)
    h, w = x.shape[2:]
    weights = []
    gy = gx = 0.0
    for yi, xi, wt, dwy, dwx in _bilinear_corners(np.asarray(y, DTYPE), np.asarray(xx, DTYPE), h, w):
        v = x[b, c, int(yi), int(xi)]
        if float(wt) != 0.0:
            weights.append(((int(yi), int(xi)), float(wt)))
        gy += float(dwy) * v
        gx += float(dwx) * v
    return weights, gy, gx


def bilinear_gather(x: np.ndarray, py: np.ndarray, px: np.ndarray, with_grad: bool = False):
    """Sample every channel of x at positions py/px of shape (B, K, H', W').

    Returns values (B, C, K, H', W'); with_grad also returns the value
    derivatives w.r.t. py and px (same shape as values)."""
    b_n, c_n, h, w = x.shape
    bidx = np.arange(b_n).reshape(b_n, 1, 1, 1)
    vals = np.zeros((b_n,) + py.shape[1:] + (c_n,), dtype=DTYPE)
    dvy = np.zeros_like(vals) if with_grad else None
    dvx = np.zeros_like(vals) if with_grad else None
    for yi, xi, wt, dwy, dwx in _bilinear_corners(py, px, h, w):
        # mixed advanced indexing puts the broadcast dims first: (B,K,H',W',C)
        corner = x[bidx, :, yi, xi]
        vals += wt[..., None] * corner
        if with_grad:
            dvy += dwy[..., None] * corner
            dvx += dwx[..., None] * corner
    vals = np.moveaxis(vals, -1, 1)
    if not with_grad:
        return vals
    return vals, np.moveaxis(dvy, -1, 1), np.moveaxis(dvx, -1, 1)


def bilinear_scatter(grad_values: np.ndarray, py: np.ndarray, px: np.ndarray, x_shape) -> np.ndarray:
    """Adjoint of bilinear_gather w.r.t. the sampled tensor."""
    b_n, c_n, h, w = x_shape
    grad = np.zeros(b_n * c_n * h * w, dtype=DTYPE)
    g = np.moveaxis(grad_values, 1, -1)  # (B,K,H',W',C)
    bidx = np.arange(b_n).reshape(b_n, 1, 1, 1)
    cidx = np.arange(c_n)
    for yi, xi, wt, _, _ in _bilinear_corners(py, px, h, w):
        flat = ((bidx * c_n)[..., None] + cidx) * (h * w) + (yi * w + xi)[..., None]
        grad += np.bincount(flat.ravel(), weights=(wt[..., None] * g).ravel(), minlength=grad.size)
    return grad.reshape(x_shape)


# ----------------------------- Tensor bundles -----------------------------

def save_tensor_bundle(path, arrays: Dict[str, np.ndarray], meta: Optional[Dict[str, Any]] = None) -> Path:
    """Write named float64 arrays to one versioned binary file.

    Layout: magic | u32 version | u64 manifest length | manifest JSON | payload.
    The manifest lists (name, dims) in write order; the payload is the
    little-endian concatenation of the arrays."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "dims": list(a.shape)})
        chunks.append(a.tobytes())
    manifest = json.dumps({"version": BUNDLE_VERSION, "arrays": entries, "meta": meta or {}},
                          sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(BUNDLE_MAGIC)
        f.write(struct.pack("<IQ", BUNDLE_VERSION, len(manifest)))
        f.write(manifest)
        for chunk in chunks:
            f.write(chunk)
    return path


def load_tensor_bundle(path) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    raw = Path(path).read_bytes()
    if raw[:4] != BUNDLE_MAGIC:
        raise ContractViolation(f"{path}: not a tensor bundle (bad magic)")
    if len(raw) < 16:
        raise ContractViolation(f"{path}: header truncated")
    version, mlen = struct.unpack("<IQ", raw[4:16])
    if version != BUNDLE_VERSION:
        raise ContractViolation(f"{path}: unsupported bundle version {version}")
    manifest = json.loads(raw[16:16 + mlen].decode("utf-8"))
    pos = 16 + mlen
    arrays: Dict[str, np.ndarray] = {}
    for entry in manifest["arrays"]:
        dims = tuple(entry["dims"])
        nbytes = int(np.prod(dims, dtype=np.int64)) * 8
        if pos + nbytes > len(raw):
            raise ContractViolation(f"{path}: payload truncated at array {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=nbytes // 8, offset=pos).astype(DTYPE).reshape(dims)
        pos += nbytes
    if pos != len(raw):
        raise ContractViolation(f"{path}: {len(raw) - pos} trailing bytes after payload")
    return arrays, manifest.get("meta", {})
