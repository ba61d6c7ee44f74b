#!/usr/bin/env python3
"""
diagnostics.py - Finite-difference gradient suite and kernel benchmark

Gradient checks compare each analytic backward against central differences
    (f(x + h) - f(x - h)) / 2h
on a random sample of entries per array, with
    rel_err = |analytic - numeric| / max(|analytic|, |numeric|, 1e-6).
Scalar losses are <output, R> for a fixed random R, so grad_output = R.

Tolerances: tol_bn for paths through train-mode BatchNorm, tol otherwise.

The benchmark times the naive oracles against the optimized kernels, but only
after the two agree; a disagreement raises instead of printing timings.
"""

import csv
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from bbox_head import BBox, BoxHead, HeadConfig
from boxhead_config import BenchConfig, GradcheckConfig
from deform_conv import DeformConvLayer, deform_conv_forward, deform_conv_forward_naive
from head_blocks import DeformInceptionBlock, InceptionBlock, plain_stack
from layers import BatchNormLayer, Module
from tensor_core import (
    DTYPE,
    ConvSpec,
    NumericFailure,
    avg_pool3x3_backward,
    avg_pool3x3_same,
    bilinear_sample,
    bilinear_sample_grad,
    conv2d_backward,
    conv2d_forward,
    conv2d_forward_naive,
    relu_backward,
    relu_forward,
    sigmoid_backward,
    sigmoid_forward,
)
from train_eval import LossWeights, center_focal_loss, giou_loss, head_loss, l1_box_loss

logger = logging.getLogger("boxhead")

# -------------- Colors --------------
try:
    from colorama import init as _colorama_init, Fore, Style
    _colorama_init()
except Exception:
    class _Dummy:
        def __getattr__(self, k): return ""
    Fore = Style = _Dummy()


def _wants_color(stream) -> bool:
    """Terminals only; NO_COLOR turns it off everywhere."""
    if os.environ.get("NO_COLOR"):
        return False
    isatty = getattr(stream, "isatty", None)
    return bool(isatty and isatty())

def _c_ok(s, on):   return (Fore.GREEN + s + Style.RESET_ALL) if on else s
def _c_fail(s, on): return (Fore.RED + s + Style.RESET_ALL)   if on else s
def _c_warn(s, on): return (Fore.YELLOW + s + Style.RESET_ALL) if on else s
def _c_head(s, on): return (Fore.CYAN + s + Style.RESET_ALL)  if on else s


# ----------------------------- finite differences -----------------------------

REL_FLOOR = 1e-6


def rel_error(analytic, numeric) -> float:
    a, n = abs(float(analytic)), abs(float(numeric))
    return abs(float(analytic) - float(numeric)) / max(a, n, REL_FLOOR)


def sample_indices(rng: np.random.Generator, shape: Tuple[int, ...], k: int) -> List[Tuple[int, ...]]:
    size = int(np.prod(shape))
    if size == 0:
        return []
    flat = rng.choice(size, size=min(k, size), replace=False)
    return [tuple(int(i) for i in np.unravel_index(f, shape)) for f in sorted(flat)]


def numeric_grad_at(f: Callable[[], float], arr: np.ndarray, idx: Tuple[int, ...], h: float) -> float:
    """Central difference of f() w.r.t. arr[idx]; arr is perturbed in place and restored."""
    orig = arr[idx]
    arr[idx] = orig + h
    fp = f()
    arr[idx] = orig - h
    fm = f()
    arr[idx] = orig
    return (fp - fm) / (2.0 * h)


def check_array(f: Callable[[], float], arr: np.ndarray, analytic: np.ndarray,
                rng: np.random.Generator, h: float, entries: int) -> float:
    """Max relative error over a random sample of entries."""
    worst = 0.0
    for idx in sample_indices(rng, arr.shape, entries):
        worst = max(worst, rel_error(analytic[idx], numeric_grad_at(f, arr, idx, h)))
    return worst


def check_module(module: Module, x: np.ndarray, rng: np.random.Generator, h: float, entries: int,
                 check_input: bool = True) -> Tuple[float, str]:
    """Gradient check of <module(x), R> w.r.t. x and every parameter.

    Returns (max relative error, name of the worst array)."""
    x = np.array(x, dtype=DTYPE)
    out = module.forward(x)
    probe = rng.normal(size=out.shape)
    module.zero_grad()
    grad_x = module.backward(probe)
    analytic = {name: g.copy() for name, g in module.named_gradients()}

    def loss() -> float:
        return float(np.sum(module.forward(x) * probe))

    results = []
    if check_input:
        results.append((check_array(loss, x, grad_x, rng, h, entries), "input"))
    for name, p in module.named_parameters():
        results.append((check_array(loss, p, analytic[name], rng, h, entries), name))
    return max(results)


# ----------------------------- components -----------------------------

def _randomize_deform_layer(layer: DeformConvLayer, rng: np.random.Generator, scale: float = 0.5):
    """Random offset and mask predictors, main bias bounded away from zero.

    Zero offsets put every sample on an integer grid point, where bilinear
    sampling has a kink. An output whose taps all land outside the map equals
    the main bias, so a zero bias sits on the kink of a following ReLU."""
    for name in ("offset_weight", "offset_bias", "mask_weight", "mask_bias"):
        layer.params[name][...] = rng.normal(scale=scale, size=layer.params[name].shape)
    bias = layer.params["bias"]
    bias[...] = rng.choice((-1.0, 1.0), size=bias.shape) * rng.uniform(0.1, 0.5, size=bias.shape)


def _conv(rng, h, entries):
    x = rng.normal(size=(2, 3, 5, 5))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    probe = rng.normal(size=(2, 4, 5, 5))
    gx, gw, gb = conv2d_backward(x, w, probe)
    loss = lambda: float(np.sum(conv2d_forward(x, None, w, b) * probe))
    return max((check_array(loss, x, gx, rng, h, entries), "input"),
               (check_array(loss, w, gw, rng, h, entries), "weight"),
               (check_array(loss, b, gb, rng, h, entries), "bias"))


def _avg_pool(rng, h, entries):
    x = rng.normal(size=(1, 2, 4, 4))
    probe = rng.normal(size=x.shape)
    loss = lambda: float(np.sum(avg_pool3x3_same(x) * probe))
    return check_array(loss, x, avg_pool3x3_backward(probe), rng, h, entries), "input"


def _relu(rng, h, entries):
    x = rng.normal(size=(1, 2, 3, 3))
    x[np.abs(x) < 1e-2] = 0.5
    probe = rng.normal(size=x.shape)
    loss = lambda: float(np.sum(relu_forward(x) * probe))
    return check_array(loss, x, relu_backward(x, probe), rng, h, entries), "input"


def _sigmoid(rng, h, entries):
    x = rng.normal(scale=2.0, size=(1, 2, 3, 3))
    probe = rng.normal(size=x.shape)
    loss = lambda: float(np.sum(sigmoid_forward(x) * probe))
    return check_array(loss, x, sigmoid_backward(sigmoid_forward(x), probe), rng, h, entries), "input"


def _batchnorm(rng, h, entries):
    bn = BatchNormLayer(3)
    bn.params["gamma"][...] = rng.uniform(0.5, 1.5, size=3)
    bn.params["beta"][...] = rng.normal(size=3)
    return check_module(bn, rng.normal(size=(2, 3, 2, 2)), rng, h, entries)


def _bilinear(rng, h, entries):
    x = rng.normal(size=(1, 1, 4, 5))
    y, xx = rng.uniform(-0.9, 3.9), rng.uniform(-0.9, 4.9)
    weights, gy, gx = bilinear_sample_grad(x, 0, 0, y, xx)
    pos = np.array([y, xx])
    f = lambda: bilinear_sample(x, 0, 0, pos[0], pos[1])
    worst = max((rel_error(gy, numeric_grad_at(f, pos, (0,), h)), "y"),
                (rel_error(gx, numeric_grad_at(f, pos, (1,), h)), "x"))
    dense = np.zeros_like(x)
    for (yi, xi), wt in weights:
        dense[0, 0, yi, xi] += wt
    return max(worst, (check_array(f, x, dense, rng, h, entries), "input"))


def _deform_conv(rng, h, entries):
    layer = DeformConvLayer(2, 3, rng)
    _randomize_deform_layer(layer, rng)
    return check_module(layer, rng.normal(size=(1, 2, 4, 4)), rng, h, entries)


def _inception(rng, h, entries):
    block = InceptionBlock(4, rng=rng)
    return check_module(block, rng.normal(size=(1, 4, 5, 5)), rng, h, entries)


def _deform_inception(rng, h, entries):
    block = DeformInceptionBlock(4, rng=rng)
    _randomize_deform_layer(block.branches[-1][1].layers[0].conv, rng)
    return check_module(block, rng.normal(size=(1, 4, 5, 5)), rng, h, entries)


def _plain_stack(rng, h, entries):
    return check_module(plain_stack(3, 2, rng=rng), rng.normal(size=(1, 3, 4, 4)), rng, h, entries)


def _random_box(rng) -> BBox:
    w, hh = rng.uniform(0.1, 0.6, size=2)
    return BBox(float(rng.uniform(w / 2, 1 - w / 2)), float(rng.uniform(hh / 2, 1 - hh / 2)), float(w), float(hh))


def _box_losses(rng, h, entries):
    pred, gt = _random_box(rng).as_array(), _random_box(rng)
    worst = (0.0, "")
    for name, fn in (("l1", l1_box_loss), ("giou", giou_loss)):
        _, grad = fn(pred, gt)
        worst = max(worst, (check_array(lambda: fn(pred, gt)[0], pred, grad, rng, h, 4), name))
    return worst


def _focal(rng, h, entries):
    pred = rng.uniform(0.05, 0.95, size=(2, 1, 4, 4))
    target = rng.uniform(0.0, 0.9, size=pred.shape)
    target[0, 0, 1, 2] = target[1, 0, 3, 0] = 1.0
    _, grad = center_focal_loss(pred, target)
    return check_array(lambda: center_focal_loss(pred, target)[0], pred, grad, rng, h, entries), "center"


def _head(rng, h, entries):
    cfg = HeadConfig(variant="inception", embed_dim=4, map_h=4, map_w=4)
    head = BoxHead(cfg, rng)
    feats = rng.normal(size=(1, 4, 4, 4))
    box = [_random_box(rng)]
    weights = LossWeights()

    def loss() -> float:
        return head_loss(head.forward(feats), box, weights)[0].total

    head.zero_grad()
    _, grad_maps = head_loss(head.forward(feats), box, weights)
    grad_feats = head.backward(grad_maps)
    analytic = {name: g.copy() for name, g in head.named_gradients()}
    results = [(check_array(loss, feats, grad_feats, rng, h, entries), "features")]
    for name, p in head.named_parameters():
        results.append((check_array(loss, p, analytic[name], rng, h, entries), name))
    return max(results)


@dataclass(frozen=True)
class Component:
    name: str
    run: Callable
    uses_bn: bool


COMPONENTS: Tuple[Component, ...] = (
    Component("conv2d", _conv, False),
    Component("avg_pool3x3", _avg_pool, False),
    Component("relu", _relu, False),
    Component("sigmoid", _sigmoid, False),
    Component("batchnorm", _batchnorm, True),
    Component("bilinear_sample", _bilinear, False),
    Component("deform_conv", _deform_conv, False),
    Component("inception_block", _inception, True),
    Component("deform_inception_block", _deform_inception, True),
    Component("plain_stack", _plain_stack, True),
    Component("box_losses", _box_losses, False),
    Component("center_focal_loss", _focal, False),
    Component("head_inception", _head, True),
)


@dataclass
class GradcheckRow:
    component: str
    seeds: int
    max_rel_err: float
    worst_array: str
    worst_seed: int
    tolerance: float
    passed: bool


def run_gradcheck(cfg: GradcheckConfig, only: Optional[Iterable[str]] = None) -> List[GradcheckRow]:
    wanted = set(only) if only else None
    rows = []
    for comp in COMPONENTS:
        if wanted is not None and comp.name not in wanted:
            continue
        tol = cfg.tol_bn if comp.uses_bn else cfg.tol
        worst = (0.0, "", -1)
        for seed in range(cfg.seeds):
            err, where = comp.run(np.random.default_rng(seed), cfg.step, cfg.entries)
            if err >= worst[0]:
                worst = (err, where, seed)
        row = GradcheckRow(comp.name, cfg.seeds, worst[0], worst[1], worst[2], tol, worst[0] < tol)
        logger.info("[GRADCHECK] %s max_rel_err=%.3e (%s, seed %d) tol=%.0e %s",
                    row.component, row.max_rel_err, row.worst_array, row.worst_seed, tol,
                    "PASS" if row.passed else "FAIL")
        rows.append(row)
    return rows


def print_gradcheck_report(rows: Sequence[GradcheckRow], stream=None):
    stream = stream or sys.stdout
    color = _wants_color(stream)
    print(_c_head("\n=== Gradient Check Summary ===", color), file=stream)
    for r in rows:
        tag = _c_ok("[OK]", color) if r.passed else _c_fail("[FAIL]", color)
        print(f"{tag} {r.component:<24} max_rel_err={r.max_rel_err:.3e} tol={r.tolerance:.0e}"
              f" worst={r.worst_array} (seed {r.worst_seed})", file=stream)
    failed = [r.component for r in rows if not r.passed]
    if failed:
        print(_c_warn(f"\nOver tolerance: {', '.join(failed)}", color), file=stream)


def write_gradcheck_report(rows: Sequence[GradcheckRow], out_dir) -> Path:
    path = Path(out_dir) / "gradcheck.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump({"passed": all(r.passed for r in rows), "components": [asdict(r) for r in rows]}, f, indent=2)
    return path


# ----------------------------- benchmark -----------------------------

EQUIVALENCE_TOL = 1e-10

BENCH_CASES = (
    ("conv2d", (2, 8, 12, 12), 8),
    ("conv2d", (8, 32, 12, 12), 32),
    ("deform_conv", (1, 4, 8, 8), 4),
    ("deform_conv", (2, 8, 12, 12), 8),
)


@dataclass
class BenchRow:
    kernel: str
    input_shape: str
    out_channels: int
    naive_s: float
    fast_s: float
    speedup: float
    max_abs_diff: float


def _best_time(fn: Callable[[], np.ndarray], repeats: int) -> Tuple[float, np.ndarray]:
    best, out = float("inf"), None
    for _ in range(max(1, repeats)):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def _bench_pair(kernel: str, shape, out_c: int, rng: np.random.Generator):
    x = rng.normal(size=shape)
    if kernel == "conv2d":
        spec = ConvSpec(shape[1], out_c)
        w, b = rng.normal(size=spec.weight_shape), rng.normal(size=out_c)
        return (lambda: conv2d_forward_naive(x, spec, w, b)), (lambda: conv2d_forward(x, spec, w, b))
    layer = DeformConvLayer(shape[1], out_c, rng)
    _randomize_deform_layer(layer, rng, scale=0.2)
    return (lambda: deform_conv_forward_naive(x, layer)), (lambda: deform_conv_forward(x, layer))


def run_bench(cfg: BenchConfig, seed: int = 0, cases=BENCH_CASES) -> List[BenchRow]:
    """The naive side runs once (it is the slow oracle); the optimized side
    reports the best of cfg.repeats."""
    rng = np.random.default_rng(seed)
    pending = []
    for kernel, shape, out_c in cases:
        naive, fast = _bench_pair(kernel, shape, out_c, rng)
        t_naive, ref = _best_time(naive, 1)
        t_fast, got = _best_time(fast, cfg.repeats)
        diff = float(np.max(np.abs(ref - got)))
        if diff > EQUIVALENCE_TOL:
            raise NumericFailure(
                f"bench: {kernel} {shape} optimized output differs from the naive oracle by {diff:.3e}; timings withheld")
        pending.append(BenchRow(kernel, "x".join(map(str, shape)), out_c, t_naive, t_fast,
                                t_naive / t_fast if t_fast > 0 else float("inf"), diff))
    for r in pending:
        note = "" if r.kernel != "conv2d" or r.speedup >= cfg.min_speedup else f" (below {cfg.min_speedup}x target)"
        logger.info("[BENCH] %s %s->%d naive=%.4fs fast=%.4fs speedup=%.1fx%s",
                    r.kernel, r.input_shape, r.out_channels, r.naive_s, r.fast_s, r.speedup, note)
    return pending


def print_bench_table(rows: Sequence[BenchRow], min_speedup: float, stream=None):
    stream = stream or sys.stdout
    color = _wants_color(stream)
    print(_c_head("\n=== Kernel Benchmark (outputs verified against naive oracle) ===", color), file=stream)
    print(f"{'kernel':<12} {'input':<14} {'out':>4} {'naive s':>10} {'fast s':>10} {'speedup':>8}", file=stream)
    for r in rows:
        line = f"{r.kernel:<12} {r.input_shape:<14} {r.out_channels:>4} {r.naive_s:>10.4f} {r.fast_s:>10.4f} {r.speedup:>7.1f}x"
        slow = r.kernel == "conv2d" and r.speedup < min_speedup
        print(_c_warn(line, color) if slow else line, file=stream)


def write_bench_csv(rows: Sequence[BenchRow], out_dir) -> Path:
    path = Path(out_dir) / "bench.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=list(BenchRow.__dataclass_fields__))
        writer.writeheader()
        for r in rows:
            writer.writerow(asdict(r))
    return path
