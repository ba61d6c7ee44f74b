#!/usr/bin/env python3
"""
boxhead_config.py - Run configuration and logging

Config file format (one file captures a whole run):

    # comment
    head.variant = inception
    optim.lr = 1e-4
    scene.distractor_prob = 0.5

Dotted keys address the sections of DEFAULT_CONFIG. Precedence, lowest
first: DEFAULT_CONFIG < config file < --set key=value < --seed/--variant/--out.
"""

import json
import logging
import os
import sys
from copy import deepcopy
from logging import Logger
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple

from pydantic import BaseModel, Field, ValidationError, model_validator

from bbox_head import HeadConfig
from tensor_core import ContractViolation
from tracking_data import ENCODER_STRIDE, EncoderConfig, SceneConfig
from train_eval import LossWeights, OptimConfig, TrainConfig, TrainHyper

LOGGER_NAME = "boxhead"

DEFAULT_CONFIG: Dict[str, Dict[str, Any]] = {
    "run": {
        "seed": 0,
        "out": "runs/latest",
        "data_root": "data/synthetic",
    },
    "head": {
        "variant": "inception",
        "block_order": "conv_relu_bn",
        "embed_dim": 32,
        "map_h": 12,
        "map_w": 12,
        "depth": 1,
        "plain_depth": 1,
        "inception_width": None,
        "deform_width": None,
        "score_width": None,
    },
    "loss": {
        "cls": 1.0,
        "l1": 5.0,
        "giou": 2.0,
    },
    "optim": {
        "lr": 1e-4,
        "weight_decay": 1e-4,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
    },
    "train": {
        "steps": 2000,
        "batch": 8,
        "log_every": 100,
        "regress_at": "gt",
        "smooth_window": 50,
    },
    "scene": {
        "seed": None,
        "image_size": 96,
        "frames": 16,
        "n_train": 64,
        "n_eval": 16,
        "distractor_prob": 0.5,
        "max_distractors": 2,
        "min_size": 0.15,
        "max_size": 0.4,
        "max_speed": 3.0,
        "noise": 0.2,
    },
    "encoder": {
        "seed": 0,
        "embed_dim": 32,
        "template": True,
    },
    "gradcheck": {
        "seeds": 20,
        "step": 1e-5,
        "tol_bn": 1e-3,
        "tol": 1e-4,
        "entries": 4,
    },
    "bench": {
        "repeats": 3,
        "min_speedup": 3.0,
    },
    "acceptance": {
        "min_eval_ao": 0.65,
        "strict": True,
    },
}


# ----------------------------- typed config -----------------------------

class GradcheckConfig(BaseModel):
    seeds: int = 20
    step: float = 1e-5
    tol_bn: float = 1e-3
    tol: float = 1e-4
    entries: int = 4


class BenchConfig(BaseModel):
    repeats: int = 3
    min_speedup: float = 3.0


class RunSection(BaseModel):
    seed: int = 0
    out: str = "runs/latest"
    data_root: str = "data/synthetic"


class AcceptanceConfig(BaseModel):
    """Pass/fail thresholds reported by eval and compare-heads.

    min_eval_ao is the eval-set AO a trained inception head must reach; when
    strict, a missed threshold or ablation ordering exits with a numeric
    failure instead of a warning."""
    min_eval_ao: float = Field(0.65, ge=0.0, le=1.0)
    strict: bool = True


class RunConfig(BaseModel):
    run: RunSection = Field(default_factory=RunSection)
    head: HeadConfig = Field(default_factory=HeadConfig)
    loss: LossWeights = Field(default_factory=LossWeights)
    optim: OptimConfig = Field(default_factory=OptimConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    scene: SceneConfig = Field(default_factory=SceneConfig)
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    gradcheck: GradcheckConfig = Field(default_factory=GradcheckConfig)
    bench: BenchConfig = Field(default_factory=BenchConfig)
    acceptance: AcceptanceConfig = Field(default_factory=AcceptanceConfig)

    @model_validator(mode="after")
    def _features_match_head(self):
        side = self.scene.image_size // ENCODER_STRIDE
        if (self.head.map_h, self.head.map_w) != (side, side):
            raise ValueError(f"head map {self.head.map_h}x{self.head.map_w} does not match "
                             f"encoder output {side}x{side} for image_size={self.scene.image_size}")
        if self.head.embed_dim != self.encoder.embed_dim:
            raise ValueError(f"head.embed_dim={self.head.embed_dim} but encoder.embed_dim={self.encoder.embed_dim}")
        return self

    def hyper(self) -> TrainHyper:
        return TrainHyper(seed=self.run.seed, optim=self.optim, train=self.train, loss=self.loss)

    def dataset_seed(self) -> int:
        return self.run.seed if self.scene.seed is None else self.scene.seed

    def with_head(self, **changes) -> "RunConfig":
        return self.model_copy(update={"head": self.head.model_copy(update=changes)})

    def with_section(self, section: str, **changes) -> "RunConfig":
        return self.model_copy(update={section: getattr(self, section).model_copy(update=changes)})


# ----------------------------- key=value files -----------------------------

def parse_value(text: str) -> Any:
    s = text.strip()
    if len(s) >= 2 and s[0] == s[-1] and s[0] in "\"'":
        return s[1:-1]
    low = s.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null", ""):
        return None
    for cast in (int, float):
        try:
            return cast(s)
        except ValueError:
            pass
    return s


def format_value(v: Any) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _split_assignment(line: str, where: str) -> Tuple[str, Any]:
    if "=" not in line:
        raise ContractViolation(f"{where}: expected 'key = value', got {line!r}")
    key, _, value = line.partition("=")
    key = key.strip()
    section, _, leaf = key.partition(".")
    if section not in DEFAULT_CONFIG or leaf not in DEFAULT_CONFIG[section]:
        raise ContractViolation(f"{where}: unknown config key {key!r}")
    return key, parse_value(value)


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, Any]:
    """Flat {dotted key: value} from key=value text."""
    out: Dict[str, Any] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, value = _split_assignment(line, f"{source} line {line_no}")
        out[key] = value
    return out


def parse_overrides(items: Iterable[str]) -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    for item in items or ():
        key, value = _split_assignment(item, "--set")
        out[key] = value
    return out


def merge_config(supplied: Dict[str, Any]) -> Dict[str, Dict[str, Any]]:
    merged = deepcopy(DEFAULT_CONFIG)
    for key, value in supplied.items():
        section, _, leaf = key.partition(".")
        merged[section][leaf] = value
    return merged


def build_run_config(config_path: Optional[str] = None, overrides: Iterable[str] = (),
                     seed: Optional[int] = None, variant: Optional[str] = None,
                     out: Optional[str] = None) -> Tuple[RunConfig, Dict[str, Any]]:
    """Returns the validated config and the flat dict of user-supplied values."""
    supplied: Dict[str, Any] = {}
    if config_path:
        supplied.update(parse_config_text(Path(config_path).read_text(encoding="utf-8"), str(config_path)))
    supplied.update(parse_overrides(overrides))
    for key, value in (("run.seed", seed), ("head.variant", variant), ("run.out", out)):
        if value is not None:
            supplied[key] = value
    try:
        cfg = RunConfig(**merge_config(supplied))
    except ValidationError as e:
        first = e.errors()[0]
        loc = ".".join(str(p) for p in first.get("loc", ()))
        raise ContractViolation(f"invalid config at {loc or '<root>'}: {first.get('msg')}") from None
    return cfg, supplied


def config_rows(cfg: RunConfig) -> List[Tuple[str, Any]]:
    data = cfg.model_dump()
    return [(f"{section}.{leaf}", data[section][leaf]) for section in DEFAULT_CONFIG for leaf in DEFAULT_CONFIG[section]]


def dump_config_text(cfg: RunConfig) -> str:
    lines = ["# effective boxhead run config; reload with --config"]
    section = None
    for key, value in config_rows(cfg):
        head = key.split(".", 1)[0]
        if head != section:
            lines.append("")
            lines.append(f"# [{head}]")
            section = head
        lines.append(f"{key} = {format_value(value)}")
    return "\n".join(lines) + "\n"


def write_run_config(cfg: RunConfig, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "run_config.txt"
    path.write_text(dump_config_text(cfg), encoding="utf-8")
    return path


def write_config_effective(cfg: RunConfig, supplied: Dict[str, Any], out_dir) -> Tuple[Path, Path]:
    """config_effective.json / .log: per key, what was supplied, what is used,
    and whether the default applied."""
    rows = []
    for key, used in config_rows(cfg):
        section, _, leaf = key.partition(".")
        raw = supplied.get(key)
        rows.append({"path": key, "raw": raw, "used": used,
                     "default": DEFAULT_CONFIG[section][leaf], "defaulted": key not in supplied})
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jpath = out_dir / "config_effective.json"
    with open(jpath, "w", encoding="utf-8") as f:
        json.dump({"values": rows}, f, indent=2)
    tpath = out_dir / "config_effective.log"
    with open(tpath, "w", encoding="utf-8") as f:
        f.write("Effective config (defaults < file < --set < flags)\n")
        for r in rows:
            mark = " *DEFAULTED*" if r["defaulted"] else ""
            f.write(f"- {r['path']}: used={r['used']} raw={r['raw']} default={r['default']}{mark}\n")
    return jpath, tpath


def record_run_config(cfg: RunConfig, supplied: Dict[str, Any], out_dir) -> None:
    write_run_config(cfg, out_dir)
    write_config_effective(cfg, supplied, out_dir)


# ----------------------------- logging -----------------------------

def mk_run_logger(out_dir, level: int = logging.INFO) -> Logger:
    """Console + file logger; earlier handlers are dropped so repeated runs in
    one process do not double-log."""
    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, "boxhead_run.log")

    logger = logging.getLogger(LOGGER_NAME)
    logger.setLevel(logging.DEBUG)
    logger.propagate = False
    for h in list(logger.handlers):
        logger.removeHandler(h)
        h.close()

    fmt = logging.Formatter("%(asctime)s | %(levelname)s | %(message)s")

    ch = logging.StreamHandler(sys.stdout)
    ch.setLevel(level)
    ch.setFormatter(fmt)

    fh = logging.FileHandler(log_path, encoding="utf-8")
    fh.setLevel(logging.DEBUG)
    fh.setFormatter(fmt)

    logger.addHandler(ch)
    logger.addHandler(fh)
    logger.info("Logging to %s", log_path)
    return logger
