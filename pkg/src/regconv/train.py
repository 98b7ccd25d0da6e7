"""Toy shape classifier over RoI features of ground-truth boxes.

Three variants share one training loop:

``plain``
    ordinary CNN (group order 1, widths multiplied by N), upright data;
``rotaug``
    the same CNN, each training scene rotated by a random element of C_N;
``equi``
    the rotation-equivariant backbone with RiRoI features, upright data.

Training scenes are upright (``theta = 0``).  Test scenes are the same kind
of objects, evaluated upright and after a random C_N rotation of the whole
scene.  Batches are a pure function of ``(seed, step)``, so a resumed run
replays the exact sequence of an uninterrupted one.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import functional as F
from .autodiff import Param, Tape, backward, clip_grad_norm, sgd_step
from .group import CyclicGroup, RRoI
from .layers import BackboneConfig, Module, ReBackbone, load_checkpoint, save_checkpoint
from .roi import AlignSpec, orientation_align_var, rroi_align_var
from .synth import CLASSES, gen_scene, rotate_scene

VARIANTS = ("plain", "rotaug", "equi")
_ALIASES = {"equivariant": "equi"}


class TrainingDiverged(FloatingPointError):
    pass


def canonical_variant(name: str) -> str:
    name = _ALIASES.get(name, name)
    if name not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; expected one of {', '.join(VARIANTS)}")
    return name


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "equi"
    group_order: int = 4
    steps: int = 2000
    seed: int = 0
    batch_size: int = 8
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    train_size: int = 2000
    test_size: int = 200
    side: int = 64
    eval_every: int = 500
    width: int = 4
    kernel_size: int = 3
    output_size: int = 7
    interp: int = 2
    precision: str = "f32"
    crop: int = 24
    clip_norm: float = 5.0

    def __post_init__(self):
        object.__setattr__(self, "variant", canonical_variant(self.variant))
        CyclicGroup(self.group_order)
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch_size < 1 or self.train_size < 1 or self.test_size < 1:
            raise ValueError("batch_size, train_size and test_size must be >= 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.crop < 8 or self.crop % 2:
            raise ValueError("crop must be an even size >= 8")
        if self.precision not in ("f32", "f64"):
            raise ValueError("precision must be f32 or f64")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    def backbone_config(self) -> BackboneConfig:
        """One residual stage and no pooling: features stay at full resolution."""
        cfg = BackboneConfig(group_order=self.group_order, stem_width=self.width,
                             stage_widths=(self.width,), fpn_width=self.width,
                             kernel_size=self.kernel_size)
        return cfg if self.variant == "equi" else cfg.plain_counterpart()

    def to_dict(self):
        return asdict(self)


class ToyClassifier(Module):
    """Backbone, RiRoI features of one box per image, linear head."""

    def __init__(self, cfg: TrainConfig):
        dtype = cfg.dtype
        self.cfg = cfg
        self.backbone = ReBackbone(cfg.backbone_config(), seed=cfg.seed, dtype=dtype)
        self.group = self.backbone.group
        bcfg = self.backbone.cfg
        self.spec = AlignSpec(cfg.output_size, 2, cfg.interp)
        features = bcfg.fpn_width * bcfg.group_order * cfg.output_size ** 2
        # a zero head makes every untrained prediction a full tie
        self.head_w = Param(np.zeros((features, len(CLASSES)), dtype), name="head.w")
        self.head_b = Param(np.zeros(len(CLASSES), dtype), name="head.b")

    def logits(self, images, boxes):
        feats = self.backbone(images.astype(self.cfg.dtype))[0]
        rois = [(i, b) for i, b in enumerate(boxes)]
        r = rroi_align_var(feats, rois, self.spec)
        r = orientation_align_var(r, [b.theta for b in boxes], self.spec)
        flat = F.reshape(r, (len(boxes), -1))
        return F.add(F.einsum("bf,fc->bc", flat, self.head_w), self.head_b)


def _scene_seed(seed: int, split: str, index: int) -> int:
    base = {"train": 0, "test": 1}[split]
    return (seed * 2 + base) * 1_000_003 + index


def make_split(cfg: TrainConfig, split: str):
    """Upright scenes with one object each."""
    size = cfg.train_size if split == "train" else cfg.test_size
    scenes = [gen_scene(_scene_seed(cfg.seed, split, i), cfg.side, 1, theta=0.0) for i in range(size)]
    return scenes


def crop_around_object(scene, size: int):
    """``size x size`` window centred on the half-integer point nearest the box centre.

    Such windows map onto each other under quarter turns of the scene, so
    cropping commutes exactly with C_4 rotations.  Pixels outside the scene
    read as zero.
    """
    ann = scene.annotations[0]
    box = ann.box
    x0 = int(np.floor(box.x)) - size // 2 + 1
    y0 = int(np.floor(box.y)) - size // 2 + 1
    pad = size
    padded = np.pad(scene.image, ((0, 0), (pad, pad), (pad, pad)))
    window = padded[:, y0 + pad : y0 + pad + size, x0 + pad : x0 + pad + size]
    shifted = RRoI(box.x - x0, box.y - y0, box.w, box.h, box.theta)
    return window, shifted, ann.class_index


def _stack(scenes, crop: int):
    items = [crop_around_object(s, crop) for s in scenes]
    images = np.stack([im for im, _, _ in items])
    boxes = [b for _, b, _ in items]
    labels = np.array([c for _, _, c in items])
    return images, boxes, labels


def rotated_copies(scenes, group: CyclicGroup, seed: int):
    rng = np.random.Generator(np.random.Philox(seed))
    ks = rng.integers(group.order, size=len(scenes))
    return [rotate_scene(s, int(k), group) for s, k in zip(scenes, ks)]


def batch_indices(cfg: TrainConfig, step: int) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(key=[cfg.seed, step]))
    return rng.integers(cfg.train_size, size=cfg.batch_size)


def _augment(cfg: TrainConfig, scenes, step: int):
    group = CyclicGroup(cfg.group_order)
    rng = np.random.Generator(np.random.Philox(key=[cfg.seed, step], counter=[0, 0, 0, 1]))
    ks = rng.integers(group.order, size=len(scenes))
    return [rotate_scene(s, int(k), group) for s, k in zip(scenes, ks)]


def tie_aware_hits(logits: np.ndarray, labels) -> np.ndarray:
    """Per-sample credit: ``1/m`` when the label is among ``m`` tied maxima."""
    top = logits == logits.max(axis=1, keepdims=True)
    return top[np.arange(len(labels)), labels] / top.sum(axis=1)


def accuracy(model: ToyClassifier, scenes, chunk: int = 25) -> float:
    if not scenes:
        return float("nan")
    model.eval()
    credit = 0.0
    for i in range(0, len(scenes), chunk):
        images, boxes, labels = _stack(scenes[i:i + chunk], model.cfg.crop)
        credit += float(tie_aware_hits(model.logits(images, boxes).value, labels).sum())
    model.train()
    return credit / len(scenes)


def train_step(model: ToyClassifier, cfg: TrainConfig, train_scenes, step: int) -> tuple[float, float]:
    batch = [train_scenes[i] for i in batch_indices(cfg, step)]
    if cfg.variant == "rotaug":
        batch = _augment(cfg, batch, step)
    images, boxes, labels = _stack(batch, cfg.crop)
    model.train()
    with Tape() as tape:
        logits = model.logits(images, boxes)
        loss = F.cross_entropy(logits, labels)
    value = float(loss.value)
    if not np.isfinite(value):
        raise TrainingDiverged(f"non-finite loss at step {step}")
    try:
        backward(tape, loss)
    except FloatingPointError as exc:
        raise TrainingDiverged(f"non-finite gradient at step {step}: {exc}") from exc
    if cfg.clip_norm:
        clip_grad_norm(model.parameters(), cfg.clip_norm)
    sgd_step(model.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay)
    acc = float(tie_aware_hits(logits.value, labels).mean())
    return value, acc


def _momentum_state(model):
    return {f"momentum/{n}": p.momentum for n, p in model.named_parameters() if p.momentum is not None}


def _restore_momentum(model, extra):
    for name, p in model.named_parameters():
        key = f"momentum/{name}"
        if key in extra:
            p.momentum = extra[key].astype(p.value.dtype)


@dataclass
class TrainResult:
    config: dict
    curve: list = field(default_factory=list)
    final: dict = field(default_factory=dict)
    wall_seconds: float = 0.0


def train_toy(cfg: TrainConfig, out_dir=None, resume=None, data=None, log=None) -> TrainResult:
    """Train one variant and evaluate upright and rotated test accuracy.

    ``out_dir`` receives a checkpoint and ``metrics.csv``.  ``resume`` is a
    checkpoint directory written by an earlier run with the same config.
    ``data`` optionally supplies ``(train, test_upright, test_rotated)``
    scene lists to share generation across runs.
    """
    start = time.perf_counter()
    model = ToyClassifier(cfg)
    group = CyclicGroup(cfg.group_order)
    if data is None:
        train = make_split(cfg, "train")
        test = make_split(cfg, "test")
        data = (train, test, rotated_copies(test, group, cfg.seed + 104729))
    train, test_up, test_rot = data

    first = 0
    curve = []
    if resume is not None:
        meta, extra = load_checkpoint(resume, model)
        _restore_momentum(model, extra)
        first = int(meta.get("step", 0))
        curve = list(meta.get("curve", []))

    def evaluate(step, loss, train_acc):
        row = {"step": step, "loss": loss, "train_acc": train_acc,
               "test_upright_acc": accuracy(model, test_up),
               "test_rotated_acc": accuracy(model, test_rot)}
        curve.append(row)
        if log:
            log(row)
        return row

    if first == 0 and not curve:
        evaluate(0, float("nan"), float("nan"))
    loss, acc = float("nan"), float("nan")
    for step in range(first, cfg.steps):
        loss, acc = train_step(model, cfg, train, step)
        done = step + 1
        if done % cfg.eval_every == 0 or done == cfg.steps:
            evaluate(done, loss, acc)

    result = TrainResult(cfg.to_dict(), curve, dict(curve[-1]), time.perf_counter() - start)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "checkpoint", model,
                        meta={"step": max(first, cfg.steps), "config": cfg.to_dict(), "curve": curve},
                        extra=_momentum_state(model))
        write_curve(out / "metrics.csv", curve)
        (out / "result.json").write_text(json.dumps(asdict(result), indent=2))
    return result


def write_curve(path, rows) -> None:
    rows = list(rows)
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def with_variant(cfg: TrainConfig, variant: str) -> TrainConfig:
    return replace(cfg, variant=variant)
