#!/usr/bin/env python3
"""
train_eval.py - Losses, AdamW, the training loop and tracking metrics

Loss = w_cls * focal(center) + w_l1 * L1(box) + w_giou * (1 - GIoU(box))

The focal term is the penalty-reduced variant (alpha=2, beta=4) over a
Gaussian centre target, averaged over the number of positives. The box
terms read the size/offset maps at one cell per example (the ground-truth
cell by default, or the predicted argmax cell).

Metrics follow one-pass evaluation:
  AO      mean IoU over every frame of every sequence
  SR_t    fraction of frames with IoU > t (strict)
  AUC     mean of SR_t over t = 0, 0.05, ..., 1.0
At t = 1 the test is IoU >= 1 so that perfect tracking scores AUC = 1.
"""

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from bbox_head import BBox, BoxHead, HeadConfig, ScoreMaps, argmax_cell, box_iou, decode_boxes, encode_box_targets
from tensor_core import DTYPE, ContractViolation, NumericFailure

logger = logging.getLogger("boxhead")

FOCAL_ALPHA = 2.0
FOCAL_BETA = 4.0
FOCAL_CLAMP = 1e-6
SUCCESS_THRESHOLDS = np.arange(21) / 20.0
LOSS_TRACE_FIELDS = ("step", "total", "cls", "l1", "giou")


# ----------------------------- configs -----------------------------

class LossWeights(BaseModel):
    cls: float = 1.0
    l1: float = 5.0
    giou: float = 2.0

    @model_validator(mode="after")
    def _check(self):
        vals = (self.cls, self.l1, self.giou)
        if any(v < 0 for v in vals):
            raise ValueError(f"loss weights must be non-negative, got {vals}")
        if not any(v > 0 for v in vals):
            raise ValueError("at least one loss weight must be positive")
        return self


class OptimConfig(BaseModel):
    lr: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class TrainConfig(BaseModel):
    steps: int = 2000
    batch: int = 8
    log_every: int = 100
    regress_at: Literal["gt", "argmax"] = "gt"
    smooth_window: int = 50


class TrainHyper(BaseModel):
    """Everything train_head needs besides the data and the head shape."""
    seed: int = 0
    optim: OptimConfig = Field(default_factory=OptimConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    loss: LossWeights = Field(default_factory=LossWeights)


# ----------------------------- center loss -----------------------------

def center_focal_loss(center_map: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    """Penalty-reduced focal loss; returns (loss, d loss / d center_map).

    Every (H, W) target slice must carry exactly one cell equal to 1."""
    pred = np.asarray(center_map, dtype=DTYPE)
    target = np.asarray(target, dtype=DTYPE)
    if pred.shape != target.shape:
        raise ContractViolation(f"center_focal_loss: shape mismatch {pred.shape} vs {target.shape}")
    if np.any(target < 0) or np.any(target > 1):
        raise ContractViolation("center_focal_loss: target values outside [0,1]")
    pos = target == 1.0
    peaks = pos.reshape(-1, pred.shape[-2] * pred.shape[-1]).sum(axis=1)
    if not np.all(peaks == 1):
        raise ContractViolation(f"center_focal_loss: every target map needs exactly one unit peak, got counts {peaks.tolist()}")

    inside = (pred >= FOCAL_CLAMP) & (pred <= 1.0 - FOCAL_CLAMP)
    p = np.clip(pred, FOCAL_CLAMP, 1.0 - FOCAL_CLAMP)
    a, b = FOCAL_ALPHA, FOCAL_BETA
    neg_w = (1.0 - target) ** b
    pos_terms = -((1.0 - p) ** a) * np.log(p)
    neg_terms = -neg_w * (p ** a) * np.log(1.0 - p)
    n_pos = float(peaks.sum())
    loss = float((pos_terms[pos].sum() + neg_terms[~pos].sum()) / n_pos)

    d_pos = a * (1.0 - p) ** (a - 1.0) * np.log(p) - (1.0 - p) ** a / p
    d_neg = -neg_w * (a * p ** (a - 1.0) * np.log(1.0 - p) - p ** a / (1.0 - p))
    grad = np.where(pos, d_pos, d_neg) * inside / n_pos
    return loss, grad


# ----------------------------- box losses -----------------------------

def _as_box_vec(box) -> np.ndarray:
    return box.as_array() if isinstance(box, BBox) else np.asarray(box, dtype=DTYPE)


def l1_box_loss(pred, gt) -> Tuple[float, np.ndarray]:
    """Mean |pred - gt| over (cx, cy, w, h); gradient w.r.t. pred."""
    diff = _as_box_vec(pred) - _as_box_vec(gt)
    return float(np.abs(diff).mean()), np.sign(diff) / 4.0


def giou_loss(pred, gt) -> Tuple[float, np.ndarray]:
    """1 - GIoU in [0, 2]; gradient w.r.t. pred (cx, cy, w, h)."""
    p, g = _as_box_vec(pred), _as_box_vec(gt)
    px0, px1 = p[0] - p[2] / 2.0, p[0] + p[2] / 2.0
    py0, py1 = p[1] - p[3] / 2.0, p[1] + p[3] / 2.0
    gx0, gx1 = g[0] - g[2] / 2.0, g[0] + g[2] / 2.0
    gy0, gy1 = g[1] - g[3] / 2.0, g[1] + g[3] / 2.0

    iw = min(px1, gx1) - max(px0, gx0)
    ih = min(py1, gy1) - max(py0, gy0)
    overlap = iw > 0 and ih > 0
    inter = iw * ih if overlap else 0.0
    pw, ph = px1 - px0, py1 - py0
    union = pw * ph + (gx1 - gx0) * (gy1 - gy0) - inter
    cw = max(px1, gx1) - min(px0, gx0)
    ch = max(py1, gy1) - min(py0, gy0)
    hull = cw * ch
    loss = float(2.0 - inter / union - union / hull)

    # d/d(px0, px1, py0, py1)
    d_inter = np.zeros(4)
    if overlap:
        d_inter[0] = -ih if px0 >= gx0 else 0.0
        d_inter[1] = ih if px1 <= gx1 else 0.0
        d_inter[2] = -iw if py0 >= gy0 else 0.0
        d_inter[3] = iw if py1 <= gy1 else 0.0
    d_area = np.array([-ph, ph, -pw, pw])
    d_union = d_area - d_inter
    d_hull = np.array([
        -ch if px0 <= gx0 else 0.0,
        ch if px1 >= gx1 else 0.0,
        -cw if py0 <= gy0 else 0.0,
        cw if py1 >= gy1 else 0.0,
    ])
    d_corners = -(d_inter * union - inter * d_union) / union ** 2 - (d_union * hull - union * d_hull) / hull ** 2
    grad = np.array([
        d_corners[0] + d_corners[1],
        d_corners[2] + d_corners[3],
        (d_corners[1] - d_corners[0]) / 2.0,
        (d_corners[3] - d_corners[2]) / 2.0,
    ])
    return loss, grad


# ----------------------------- head loss -----------------------------

@dataclass
class LossBreakdown:
    total: float
    cls: float
    l1: float
    giou: float


def head_loss(maps: ScoreMaps, boxes: Sequence[BBox], weights: LossWeights,
              regress_at: str = "gt") -> Tuple[LossBreakdown, ScoreMaps]:
    """Weighted loss over a batch and its gradient w.r.t. the three maps."""
    b_n = maps.batch
    if len(boxes) != b_n:
        raise ContractViolation(f"head_loss: {len(boxes)} boxes for batch {b_n}")
    h, w = maps.grid
    targets = [encode_box_targets(box, h, w) for box in boxes]
    center_t = np.stack([t.center for t in targets])[:, None]
    cls_loss, g_center = center_focal_loss(maps.center, center_t)

    grads = ScoreMaps(g_center * weights.cls, np.zeros_like(maps.size), np.zeros_like(maps.offset))
    l1_sum = giou_sum = 0.0
    for b, (box, tgt) in enumerate(zip(boxes, targets)):
        y, x = tgt.cell if regress_at == "gt" else argmax_cell(maps.center[b, 0])
        pred = np.array([(x + maps.offset[b, 0, y, x]) / w, (y + maps.offset[b, 1, y, x]) / h,
                         maps.size[b, 0, y, x], maps.size[b, 1, y, x]])
        l1, g_l1 = l1_box_loss(pred, box)
        gi, g_gi = giou_loss(pred, box)
        l1_sum += l1
        giou_sum += gi
        g = (weights.l1 * g_l1 + weights.giou * g_gi) / b_n
        grads.offset[b, 0, y, x] += g[0] / w
        grads.offset[b, 1, y, x] += g[1] / h
        grads.size[b, 0, y, x] += g[2]
        grads.size[b, 1, y, x] += g[3]

    l1_mean, giou_mean = l1_sum / b_n, giou_sum / b_n
    total = weights.cls * cls_loss + weights.l1 * l1_mean + weights.giou * giou_mean
    return LossBreakdown(float(total), float(cls_loss), float(l1_mean), float(giou_mean)), grads


# ----------------------------- AdamW -----------------------------

@dataclass
class OptimState:
    lr: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: OptimConfig) -> "OptimState":
        return cls(cfg.lr, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps)


def adamw_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: OptimState):
    """One decoupled-weight-decay Adam step, applied to the arrays in place."""
    if set(params) != set(grads):
        missing = sorted(set(params) ^ set(grads))
        raise ContractViolation(f"adamw_step: params/grads keys differ at {missing[0]!r}")
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise ContractViolation(f"adamw_step: shape mismatch for {name!r}: {grads[name].shape} vs {p.shape}")

    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p *= 1.0 - state.lr * state.weight_decay
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


# ----------------------------- training -----------------------------

@dataclass
class TrainingSet:
    features: np.ndarray  # (N, D, H, W)
    boxes: List[BBox]

    def __post_init__(self):
        if self.features.ndim != 4:
            raise ContractViolation(f"TrainingSet.features must be (N,D,H,W), got {self.features.shape}")
        if len(self.boxes) != self.features.shape[0]:
            raise ContractViolation(f"TrainingSet: {len(self.boxes)} boxes for {self.features.shape[0]} feature maps")

    def __len__(self):
        return len(self.boxes)


@dataclass
class TrainResult:
    head: BoxHead
    trace: List[Dict[str, float]]
    optim: OptimState


def windowed_mean(values: Sequence[float], window: int, tail: bool = False) -> float:
    values = list(values)
    if not values:
        return float("nan")
    window = max(1, min(window, len(values)))
    chunk = values[-window:] if tail else values[:window]
    return float(np.mean(chunk))


def train_head(dataset: TrainingSet, config: HeadConfig, hyper: TrainHyper,
               head: Optional[BoxHead] = None) -> TrainResult:
    """Seeded minibatch training.

    The head is built from `config` with a generator seeded by hyper.seed
    unless one is passed in (it is then trained in place). Batches are drawn
    with replacement from a second generator derived from the same seed, so
    the same inputs reproduce the same loss trace bit for bit."""
    if len(dataset) == 0:
        raise ContractViolation("train_head: dataset is empty")
    init_rng, batch_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(hyper.seed).spawn(2))
    if head is None:
        head = BoxHead(config, init_rng)
    elif head.config != config:
        raise ContractViolation("train_head: head was built for a different config")
    head.check_features(dataset.features[:1])
    optim, train, weights = hyper.optim, hyper.train, hyper.loss
    rng = batch_rng
    state = OptimState.from_config(optim)
    params = dict(head.named_parameters())
    trace: List[Dict[str, float]] = []
    head.train()
    logger.info("[TRAIN] variant=%s params=%d examples=%d steps=%d batch=%d lr=%g",
                head.config.variant, head.parameter_count(), len(dataset), train.steps, train.batch, optim.lr)

    for step in range(1, train.steps + 1):
        idx = rng.integers(0, len(dataset), size=train.batch)
        head.zero_grad()
        try:
            maps = head.forward(dataset.features[idx])
            parts, grad_maps = head_loss(maps, [dataset.boxes[i] for i in idx], weights, train.regress_at)
            if not np.isfinite(parts.total):
                raise NumericFailure("non-finite loss")
            head.backward(grad_maps)
        except NumericFailure as e:
            raise NumericFailure(f"{e} at step {step}") from e
        grads = dict(head.named_gradients())
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericFailure(f"non-finite gradient for {name!r} at step {step}")
        adamw_step(params, grads, state)
        trace.append({"step": step, **asdict(parts)})
        if train.log_every and (step % train.log_every == 0 or step == train.steps):
            logger.info("[TRAIN] step %d/%d total=%.6f cls=%.6f l1=%.6f giou=%.6f",
                        step, train.steps, parts.total, parts.cls, parts.l1, parts.giou)

    if trace:
        totals = [r["total"] for r in trace]
        logger.info("[TRAIN] loss window mean %.6f -> %.6f",
                    windowed_mean(totals, train.smooth_window), windowed_mean(totals, train.smooth_window, tail=True))
    return TrainResult(head, trace, state)


def write_loss_trace(trace: Sequence[Dict[str, float]], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=LOSS_TRACE_FIELDS)
        writer.writeheader()
        for row in trace:
            writer.writerow({k: repr(row[k]) if k != "step" else row[k] for k in LOSS_TRACE_FIELDS})
    return path


# ----------------------------- tracking + metrics -----------------------------

def track_sequences(head: BoxHead, sequences: Sequence[np.ndarray], chunk: int = 16) -> List[List[BBox]]:
    """One-pass prediction: every frame of every (T, D, H, W) sequence is
    decoded independently in eval mode."""
    head.eval()
    out: List[List[BBox]] = []
    for feats in sequences:
        boxes: List[BBox] = []
        for lo in range(0, feats.shape[0], chunk):
            boxes.extend(decode_boxes(head.forward(feats[lo:lo + chunk])))
        out.append(boxes)
    return out


@dataclass
class SequenceMetrics:
    name: str
    frames: int
    ao: float
    sr50: float
    sr75: float


@dataclass
class MetricReport:
    ao: float
    sr50: float
    sr75: float
    auc: float
    thresholds: List[float]
    success_curve: List[float]
    sequences: List[SequenceMetrics]
    ious: List[List[float]] = field(repr=False, default_factory=list)

    def to_dict(self) -> Dict:
        return asdict(self)


def success_rate(ious: np.ndarray, threshold: float) -> float:
    if ious.size == 0:
        return 0.0
    hit = ious >= 1.0 if threshold >= 1.0 else ious > threshold
    return float(np.mean(hit))


def summarize_ious(per_sequence: Sequence[Sequence[float]], names: Optional[Sequence[str]] = None) -> MetricReport:
    names = list(names) if names is not None else [f"seq_{i:04d}" for i in range(len(per_sequence))]
    if len(names) != len(per_sequence):
        raise ContractViolation(f"{len(names)} names for {len(per_sequence)} sequences")
    all_ious = np.concatenate([np.asarray(s, dtype=DTYPE) for s in per_sequence]) if per_sequence else np.zeros(0)
    if all_ious.size == 0:
        raise ContractViolation("cannot summarize an empty set of frames")
    curve = [success_rate(all_ious, t) for t in SUCCESS_THRESHOLDS]
    rows = []
    for name, s in zip(names, per_sequence):
        arr = np.asarray(s, dtype=DTYPE)
        rows.append(SequenceMetrics(name, int(arr.size), float(arr.mean()) if arr.size else 0.0,
                                    success_rate(arr, 0.5), success_rate(arr, 0.75)))
    return MetricReport(
        ao=float(all_ious.mean()),
        sr50=success_rate(all_ious, 0.5),
        sr75=success_rate(all_ious, 0.75),
        auc=float(np.mean(curve)),
        thresholds=[float(t) for t in SUCCESS_THRESHOLDS],
        success_curve=curve,
        sequences=rows,
        ious=[[float(v) for v in s] for s in per_sequence],
    )


def evaluate(outputs: Sequence[Sequence[BBox]], gts: Sequence[Sequence[BBox]],
             names: Optional[Sequence[str]] = None) -> MetricReport:
    if len(outputs) != len(gts):
        raise ContractViolation(f"evaluate: {len(outputs)} output sequences for {len(gts)} ground-truth sequences")
    per_seq = []
    for i, (pred, gt) in enumerate(zip(outputs, gts)):
        if len(pred) != len(gt):
            label = names[i] if names is not None else i
            raise ContractViolation(f"evaluate: sequence {label} has {len(pred)} outputs for {len(gt)} frames")
        per_seq.append([box_iou(p, g) for p, g in zip(pred, gt)])
    return summarize_ious(per_seq, names)


def write_metric_report(report: MetricReport, out_dir, stem: str = "metrics") -> Tuple[Path, Path]:
    """<stem>.json (full report) and <stem>.csv (one row per sequence + ALL)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jpath = out_dir / f"{stem}.json"
    with open(jpath, "w", encoding="utf-8") as f:
        json.dump(report.to_dict(), f, indent=2)
    cpath = out_dir / f"{stem}.csv"
    with open(cpath, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["sequence", "frames", "AO", "SR_0.5", "SR_0.75"])
        for row in report.sequences:
            writer.writerow([row.name, row.frames, repr(row.ao), repr(row.sr50), repr(row.sr75)])
        writer.writerow(["ALL", sum(r.frames for r in report.sequences), repr(report.ao), repr(report.sr50), repr(report.sr75)])
    logger.info("[EVAL] AO=%.4f SR_0.5=%.4f SR_0.75=%.4f AUC=%.4f -> %s", report.ao, report.sr50, report.sr75, report.auc, jpath)
    return jpath, cpath
