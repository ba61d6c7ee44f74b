#!/usr/bin/env python3
"""
tracking_data.py - Synthetic tracking sequences, the frozen toy encoder,
and GOT-10k / OTB annotation parsing

Synthetic scenes: one textured rectangle moving at constant velocity with
wall bounce over a low-amplitude noise background, plus (with probability
distractor_prob) up to max_distractors other textured rectangles that start
with IoU <= 0.3 against the target. Everything is a pure function of the seed.

On-disk dataset layout:
  <root>/dataset.json
  <root>/<split>/seq_%04d/frames.bin        tensor bundle, array "frames" (T,3,S,S)
  <root>/<split>/seq_%04d/groundtruth.txt   GOT-10k lines "x,y,w,h" in pixels
"""

import hashlib
import json
import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, model_validator

from bbox_head import BBox, box_iou
from head_blocks import ConvBlock
from tensor_core import (
    DTYPE,
    AnnotationParseError,
    ContractViolation,
    as_tensor4,
    intra_op_threads,
    load_tensor_bundle,
    save_tensor_bundle,
)

logger = logging.getLogger("boxhead")

SPLITS = ("train", "eval")
DATASET_VERSION = 1
DISTRACTOR_MAX_IOU = 0.3
SPAWN_TRIES = 100
ENCODER_STRIDE = 8


# ----------------------------- configs -----------------------------

class SceneConfig(BaseModel):
    # dataset seed; none falls back to run.seed
    seed: Optional[int] = None
    image_size: int = 96
    frames: int = 16
    n_train: int = 64
    n_eval: int = 16
    distractor_prob: float = 0.5
    max_distractors: int = 2
    min_size: float = 0.15
    max_size: float = 0.4
    max_speed: float = 3.0
    noise: float = 0.2

    @model_validator(mode="after")
    def _check(self):
        if self.image_size < ENCODER_STRIDE or self.image_size % ENCODER_STRIDE:
            raise ValueError(f"image_size must be a positive multiple of {ENCODER_STRIDE}")
        if self.frames < 1:
            raise ValueError("frames must be >= 1")
        if self.n_train < 0 or self.n_eval < 0:
            raise ValueError("sequence counts must be non-negative")
        if not 0.0 < self.min_size <= self.max_size:
            raise ValueError("need 0 < min_size <= max_size")
        if not 0.0 <= self.distractor_prob <= 1.0:
            raise ValueError("distractor_prob must lie in [0,1]")
        return self


class EncoderConfig(BaseModel):
    seed: int = 0
    embed_dim: int = 32
    template: bool = True


# ----------------------------- synthetic scenes -----------------------------

@dataclass(frozen=True)
class SyntheticScene:
    seed: int
    image_size: int = 96
    frames: int = 16
    distractor_prob: float = 0.5
    max_distractors: int = 2
    min_size: float = 0.15
    max_size: float = 0.4
    max_speed: float = 3.0
    noise: float = 0.2
    # optional overrides (pixels, pixels/frame)
    init_xy: Optional[Tuple[float, float]] = None
    velocity: Optional[Tuple[float, float]] = None
    size: Optional[Tuple[int, int]] = None

    @classmethod
    def from_config(cls, cfg: SceneConfig, seed: int) -> "SyntheticScene":
        return cls(seed=seed, image_size=cfg.image_size, frames=cfg.frames,
                   distractor_prob=cfg.distractor_prob, max_distractors=cfg.max_distractors,
                   min_size=cfg.min_size, max_size=cfg.max_size, max_speed=cfg.max_speed, noise=cfg.noise)


class PixelBox(NamedTuple):
    x: float
    y: float
    w: float
    h: float


@dataclass
class SequenceRecord:
    name: str
    frames: np.ndarray          # (T, 3, S, S)
    boxes: List[BBox]           # normalized gt per frame
    pixel_boxes: List[PixelBox]
    velocities: List[Tuple[float, float]] = field(default_factory=list)

    @property
    def image_size(self) -> int:
        return self.frames.shape[-1]

    def __len__(self):
        return len(self.boxes)


@dataclass
class _Mover:
    x: float
    y: float
    vx: float
    vy: float
    w: int
    h: int
    texture: np.ndarray

    def raster(self, side: int) -> Tuple[int, int]:
        ix = int(min(max(round(self.x), 0), side - self.w))
        iy = int(min(max(round(self.y), 0), side - self.h))
        return ix, iy

    def advance(self, side: int):
        self.x, self.vx = _bounce(self.x + self.vx, self.vx, side - self.w)
        self.y, self.vy = _bounce(self.y + self.vy, self.vy, side - self.h)


def _bounce(pos: float, vel: float, hi: float) -> Tuple[float, float]:
    if pos < 0.0:
        pos, vel = -pos, -vel
    elif pos > hi:
        pos, vel = 2.0 * hi - pos, -vel
    return min(max(pos, 0.0), hi), vel


def _spawn(rng: np.random.Generator, scene: SyntheticScene, side: int,
           size=None, xy=None, vel=None) -> _Mover:
    if size is None:
        w, h = (int(round(f * side)) for f in rng.uniform(scene.min_size, scene.max_size, size=2))
    else:
        w, h = int(size[0]), int(size[1])
    if w < 1 or h < 1 or w > side or h > side:
        raise ContractViolation(f"infeasible scene: object {w}x{h} does not fit a {side}x{side} image")
    texture = rng.uniform(0.3, 1.0, size=(3, h, w))
    x, y = xy if xy is not None else (rng.uniform(0, side - w), rng.uniform(0, side - h))
    vx, vy = vel if vel is not None else tuple(rng.uniform(-scene.max_speed, scene.max_speed, size=2))
    if not (0 <= x <= side - w and 0 <= y <= side - h):
        raise ContractViolation(f"infeasible scene: start ({x}, {y}) puts the {w}x{h} object outside the image")
    return _Mover(float(x), float(y), float(vx), float(vy), w, h, texture)


def _pixel_box(m: _Mover, side: int) -> PixelBox:
    ix, iy = m.raster(side)
    return PixelBox(float(ix), float(iy), float(m.w), float(m.h))


def generate_sequence(scene: SyntheticScene, name: str = "seq_0000") -> SequenceRecord:
    side = scene.image_size
    rng = np.random.default_rng(scene.seed)
    target = _spawn(rng, scene, side, scene.size, scene.init_xy, scene.velocity)

    distractors: List[_Mover] = []
    if scene.max_distractors > 0 and rng.uniform() < scene.distractor_prob:
        target_box = BBox.from_pixels(*_pixel_box(target, side), side, side)
        for _ in range(int(rng.integers(1, scene.max_distractors + 1))):
            for _ in range(SPAWN_TRIES):
                cand = _spawn(rng, scene, side)
                if box_iou(BBox.from_pixels(*_pixel_box(cand, side), side, side), target_box) <= DISTRACTOR_MAX_IOU:
                    distractors.append(cand)
                    break

    frames = np.empty((scene.frames, 3, side, side), dtype=DTYPE)
    pixel_boxes: List[PixelBox] = []
    velocities: List[Tuple[float, float]] = []
    for t in range(scene.frames):
        img = rng.uniform(0.0, scene.noise, size=(3, side, side)) if scene.noise > 0 else np.zeros((3, side, side))
        for m in distractors + [target]:
            ix, iy = m.raster(side)
            img[:, iy:iy + m.h, ix:ix + m.w] = m.texture
        frames[t] = img
        pixel_boxes.append(_pixel_box(target, side))
        velocities.append((target.vx, target.vy))
        for m in distractors + [target]:
            m.advance(side)

    boxes = [BBox.from_pixels(*pb, side, side) for pb in pixel_boxes]
    return SequenceRecord(name, frames, boxes, pixel_boxes, velocities)


# ----------------------------- toy encoder -----------------------------

class ToyEncoder:
    """Frozen stand-in for the backbone: three conv3x3 -> ReLU -> BN(eval)
    blocks, each followed by stride-2 subsampling, (B,3,S,S) -> (B,D,S/8,S/8).
    Never trained."""

    def __init__(self, seed: int = 0, embed_dim: int = 32, image_size: int = 96):
        rng = np.random.default_rng(seed)
        self.seed = seed
        self.embed_dim = embed_dim
        self.image_size = image_size
        widths = (3, 16, 32, embed_dim)
        self.blocks = [ConvBlock(cin, cout, 3, rng=rng).eval() for cin, cout in zip(widths[:-1], widths[1:])]

    @property
    def map_size(self) -> int:
        return self.image_size // ENCODER_STRIDE

    def __call__(self, images: np.ndarray) -> np.ndarray:
        x = as_tensor4(images, "frames")
        if x.shape[1:] != (3, self.image_size, self.image_size):
            raise ContractViolation(
                f"encoder expects frames (B,3,{self.image_size},{self.image_size}), got {x.shape}")
        for block in self.blocks:
            x = np.ascontiguousarray(block.forward(x)[:, :, ::2, ::2])
        return x


def template_gain(features: np.ndarray, box: BBox) -> np.ndarray:
    """Per-channel gain from the mean feature over the template box cells,
    normalized to mean 1."""
    d, h, w = features.shape
    x0, y0, x1, y1 = box.to_corners()
    c0, c1 = max(0, int(math.floor(x0 * w))), min(w, max(int(math.ceil(x1 * w)), int(math.floor(x0 * w)) + 1))
    r0, r1 = max(0, int(math.floor(y0 * h))), min(h, max(int(math.ceil(y1 * h)), int(math.floor(y0 * h)) + 1))
    desc = features[:, r0:r1, c0:c1].mean(axis=(1, 2))
    return desc / (desc.mean() + 1e-6)


def encode_frames(frames: np.ndarray, encoder: ToyEncoder,
                  template: Optional[Tuple[np.ndarray, BBox]] = None, chunk: int = 16) -> np.ndarray:
    """(T,3,S,S) -> (T,D,S/8,S/8). With a (frame, box) template, features are
    gated channel-wise by template_gain of the template frame."""
    frames = as_tensor4(frames, "frames")
    feats = np.concatenate([encoder(frames[lo:lo + chunk]) for lo in range(0, frames.shape[0], chunk)], axis=0) \
        if frames.shape[0] else np.zeros((0, encoder.embed_dim, encoder.map_size, encoder.map_size))
    if template is not None:
        t_frame, t_box = template
        t_feat = encoder(np.asarray(t_frame, dtype=DTYPE)[None])[0]
        feats = feats * template_gain(t_feat, t_box)[None, :, None, None]
    return feats


def encode_sequence(record: SequenceRecord, encoder: ToyEncoder, use_template: bool = True) -> np.ndarray:
    template = (record.frames[0], record.boxes[0]) if use_template else None
    return encode_frames(record.frames, encoder, template)


# ----------------------------- annotations -----------------------------

_OTB_SPLIT = re.compile(r"[,\t ]+")


def _parse_lines(text: str, splitter) -> List[PixelBox]:
    boxes: List[PixelBox] = []
    lines = text.rstrip().splitlines() if text.strip() else []
    for line_no, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            raise AnnotationParseError(line_no, "empty line")
        fields = splitter(line)
        if len(fields) != 4:
            raise AnnotationParseError(line_no, f"expected 4 fields x,y,w,h, got {len(fields)}")
        try:
            vals = [float(f) for f in fields]
        except ValueError:
            raise AnnotationParseError(line_no, f"non-numeric field in {line!r}") from None
        if not all(math.isfinite(v) for v in vals):
            raise AnnotationParseError(line_no, f"non-finite field in {line!r}")
        if vals[2] <= 0 or vals[3] <= 0:
            raise AnnotationParseError(line_no, f"width/height must be positive, got {vals[2]}, {vals[3]}")
        boxes.append(PixelBox(*vals))
    return boxes


def parse_got10k_annotations(text: str) -> List[PixelBox]:
    return _parse_lines(text, lambda line: [f.strip() for f in line.split(",")])


def parse_otb_annotations(text: str) -> List[PixelBox]:
    """Comma-, tab- or whitespace-separated x,y,w,h."""
    return _parse_lines(text, lambda line: [f for f in _OTB_SPLIT.split(line) if f])


def normalize_boxes(boxes: Sequence[PixelBox], img_w: int, img_h: int) -> List[BBox]:
    return [BBox.from_pixels(*b, img_w, img_h) for b in boxes]


def serialize_got10k_annotations(boxes: Sequence[PixelBox]) -> str:
    return "".join(",".join(repr(float(v)) for v in b) + "\n" for b in boxes)


def load_annotation_file(path, fmt: str = "got10k") -> List[PixelBox]:
    text = Path(path).read_text(encoding="utf-8")
    if fmt == "got10k":
        return parse_got10k_annotations(text)
    if fmt == "otb":
        return parse_otb_annotations(text)
    raise ContractViolation(f"unknown annotation format {fmt!r}")


# ----------------------------- dataset on disk -----------------------------

def sequence_seed(seed: int, split: str, index: int) -> int:
    return int(np.random.SeedSequence([seed, SPLITS.index(split), index]).generate_state(1)[0])


def _write_sequence(seq_dir: Path, record: SequenceRecord, meta: dict):
    seq_dir.mkdir(parents=True, exist_ok=True)
    save_tensor_bundle(seq_dir / "frames.bin", {"frames": record.frames}, meta)
    (seq_dir / "groundtruth.txt").write_text(serialize_got10k_annotations(record.pixel_boxes), encoding="utf-8")


def write_dataset(root, scene: SceneConfig, seed: int = 0) -> dict:
    counts = {"train": scene.n_train, "eval": scene.n_eval}
    empty = [s for s, n in counts.items() if n < 1]
    if empty:
        raise ContractViolation(f"empty dataset: split(s) {', '.join(empty)} would contain no sequences")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)

    jobs = []
    for split in SPLITS:
        for i in range(counts[split]):
            jobs.append((split, i, sequence_seed(seed, split, i)))

    def _one(job):
        split, i, s = job
        name = f"seq_{i:04d}"
        record = generate_sequence(SyntheticScene.from_config(scene, s), name)
        _write_sequence(root / split / name, record, {"name": name, "seed": s, "split": split})

    with ThreadPoolExecutor(max_workers=intra_op_threads()) as pool:
        for f in [pool.submit(_one, job) for job in jobs]:
            f.result()

    manifest = {"version": DATASET_VERSION, "seed": seed, "scene": scene.model_dump(), "splits": counts}
    with open(root / "dataset.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    logger.info("[GEN] wrote %d train + %d eval sequences to %s", counts["train"], counts["eval"], root)
    return manifest


def read_manifest(root) -> dict:
    path = Path(root) / "dataset.json"
    if not path.exists():
        raise FileNotFoundError(f"no dataset at {root} (missing dataset.json)")
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def load_dataset(root, split: str = "train") -> List[SequenceRecord]:
    if split not in SPLITS:
        raise ContractViolation(f"unknown split {split!r}; expected one of {SPLITS}")
    manifest = read_manifest(root)
    records = []
    for i in range(manifest["splits"][split]):
        name = f"seq_{i:04d}"
        seq_dir = Path(root) / split / name
        arrays, _ = load_tensor_bundle(seq_dir / "frames.bin")
        frames = arrays["frames"]
        side = frames.shape[-1]
        pixel_boxes = load_annotation_file(seq_dir / "groundtruth.txt")
        if len(pixel_boxes) != frames.shape[0]:
            raise ContractViolation(f"{seq_dir}: {len(pixel_boxes)} annotations for {frames.shape[0]} frames")
        records.append(SequenceRecord(name, frames, normalize_boxes(pixel_boxes, side, side), pixel_boxes))
    return records


def dataset_checksum(root) -> str:
    """sha256 over every file (relative path + bytes) in sorted order."""
    root = Path(root)
    digest = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        digest.update(path.relative_to(root).as_posix().encode("utf-8"))
        digest.update(b"\0")
        digest.update(path.read_bytes())
    return digest.hexdigest()
