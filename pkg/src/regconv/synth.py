"""Synthetic scenes of oriented shapes with exact rotated-box labels.

Randomness comes from ``numpy``'s Philox counter-based generator seeded
with the scene seed, so a seed reproduces a scene bit for bit on any
platform.  Rendering supersamples each pixel on a fixed 4x4 grid.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .group import CyclicGroup, RRoI, act_on_rroi, image_center
from .tensor import FormatError, read_tensor, rotate_planar, rotation_matrix, write_tensor

CLASSES = ("rect", "ellipse", "L-shape", "T-shape")
DATASET_VERSION = "regconv-ds-v1"
SUPERSAMPLE = 4


@dataclass(frozen=True)
class Annotation:
    box: RRoI
    label: str

    @property
    def class_index(self) -> int:
        return CLASSES.index(self.label)

    def to_dict(self):
        b = self.box
        return {"x": b.x, "y": b.y, "w": b.w, "h": b.h, "theta": b.theta, "label": self.label}

    @classmethod
    def from_dict(cls, d):
        return cls(RRoI(d["x"], d["y"], d["w"], d["h"], d["theta"]), d["label"])


@dataclass(frozen=True)
class SyntheticScene:
    image: np.ndarray  # (C, side, side)
    annotations: tuple = ()
    seed: int = 0

    @property
    def side(self) -> int:
        return self.image.shape[-1]

    def __eq__(self, other):
        if not isinstance(other, SyntheticScene):
            return NotImplemented
        return (self.seed == other.seed and self.annotations == other.annotations
                and self.image.shape == other.image.shape
                and np.array_equal(self.image, other.image))

    __hash__ = None


def shape_mask(label: str, a, b):
    """Indicator of a shape in box-normalized coordinates ``a, b in [-1, 1]``.

    ``a`` runs along the box width, ``b`` along its height (downwards).
    Every shape covers at least 3/4 of its box.
    """
    inside = (np.abs(a) <= 1) & (np.abs(b) <= 1)
    if label == "rect":
        return inside
    if label == "ellipse":
        return a * a + b * b <= 1
    if label == "L-shape":
        return inside & ((a <= 0) | (b >= 0))
    if label == "T-shape":
        return inside & ((b <= 0) | (np.abs(a) <= 0.5))
    raise ValueError(f"unknown shape class {label!r}")


def render_shape(canvas: np.ndarray, box: RRoI, label: str, intensity: float = 1.0):
    """Add an anti-aliased shape to a ``(side, side)`` canvas in place."""
    side = canvas.shape[-1]
    radius = 0.5 * math.hypot(box.w, box.h) + 1
    x0, x1 = max(0, int(math.floor(box.x - radius))), min(side, int(math.ceil(box.x + radius)) + 1)
    y0, y1 = max(0, int(math.floor(box.y - radius))), min(side, int(math.ceil(box.y + radius)) + 1)
    if x0 >= x1 or y0 >= y1:
        return
    sub = (np.arange(SUPERSAMPLE) + 0.5) / SUPERSAMPLE - 0.5
    ys = np.arange(y0, y1)[:, None, None, None] + sub[None, None, :, None]
    xs = np.arange(x0, x1)[None, :, None, None] + sub[None, None, None, :]
    dx, dy = xs - box.x, ys - box.y
    # local coordinates: apply the inverse rotation (the transpose)
    rot = rotation_matrix(box.theta)
    u = rot[0, 0] * dx + rot[1, 0] * dy
    v = rot[0, 1] * dx + rot[1, 1] * dy
    hit = shape_mask(label, u / (box.w / 2), v / (box.h / 2))
    canvas[y0:y1, x0:x1] += intensity * hit.mean(axis=(-2, -1))


def rasterize_box(box: RRoI, side: int) -> np.ndarray:
    """Boolean mask of pixel centres inside ``box``."""
    ys, xs = np.mgrid[0:side, 0:side].astype(float)
    rot = rotation_matrix(box.theta)
    dx, dy = xs - box.x, ys - box.y
    u = rot[0, 0] * dx + rot[1, 0] * dy
    v = rot[0, 1] * dx + rot[1, 1] * dy
    return (np.abs(u) <= box.w / 2) & (np.abs(v) <= box.h / 2)


def border_margin(side: int) -> float:
    return side / 8


def box_is_interior(box: RRoI, side: int, margin: float | None = None) -> bool:
    margin = border_margin(side) if margin is None else margin
    corners = box.corners()
    return bool(np.all(corners >= margin) and np.all(corners <= side - 1 - margin))


def gen_scene(seed: int, side: int = 64, num_objects: int = 1, *, classes=None,
              theta: float | None = None, noise: float = 0.02, channels: int = 1,
              rotation_safe: bool = True, max_attempts: int = 100) -> SyntheticScene:
    """Render ``num_objects`` random shapes with their rotated boxes.

    ``classes`` optionally fixes the label of each object and ``theta``
    fixes every orientation (``0`` gives upright objects).  With
    ``rotation_safe`` each object's circumscribed circle stays inside the
    disk inscribed in the border margin, so any rotation of the scene about
    its centre keeps the object interior.
    """
    if side < 64:
        raise ValueError("side must be >= 64")
    if not 0 <= num_objects <= 8:
        raise ValueError("num_objects must be in [0, 8]")
    if channels not in (1, 3):
        raise ValueError("channels must be 1 or 3")
    rng = np.random.Generator(np.random.Philox(seed))
    margin = border_margin(side)
    cx, cy = image_center(side)
    canvas = np.zeros((side, side))
    placed = []
    annotations = []
    for i in range(num_objects):
        label = CLASSES[rng.integers(len(CLASSES))] if classes is None else classes[i]
        w, h = rng.uniform(side / 10, side / 4, size=2)
        angle = rng.uniform(0, 2 * math.pi) if theta is None else theta
        radius = 0.5 * math.hypot(w, h)
        for _ in range(max_attempts):
            if rotation_safe:
                reach = (side - 1) / 2 - margin - radius
                if reach < 0:
                    raise ValueError("object too large for a rotation-safe placement")
                rr = reach * math.sqrt(rng.uniform())
                phi = rng.uniform(0, 2 * math.pi)
                x, y = cx + rr * math.cos(phi), cy + rr * math.sin(phi)
            else:
                x, y = rng.uniform(margin + radius, side - 1 - margin - radius, size=2)
            box = RRoI(x, y, w, h, angle)
            if not rotation_safe and not box_is_interior(box, side, margin):
                continue
            if all(math.hypot(x - px, y - py) > radius + pr + 1 for px, py, pr in placed):
                break
        else:
            raise RuntimeError(f"could not place object {i} without overlap after {max_attempts} attempts")
        placed.append((x, y, radius))
        render_shape(canvas, box, label)
        annotations.append(Annotation(box, label))
    image = np.repeat(canvas[None], channels, axis=0)
    if noise > 0:
        image = image + rng.normal(0.0, noise, size=image.shape)
    return SyntheticScene(image, tuple(annotations), seed)


def rotate_scene(scene: SyntheticScene, k: int, group: CyclicGroup) -> SyntheticScene:
    """Rotate image and boxes together by the group element ``k``."""
    angle = group.angle_of(k)
    if k == 0:
        return SyntheticScene(scene.image.copy(), scene.annotations, scene.seed)
    center = image_center(scene.side)
    image = rotate_planar(scene.image, angle)
    annotations = []
    for ann in scene.annotations:
        box = act_on_rroi(ann.box, angle, center)
        if not box_is_interior(box, scene.side):
            raise ValueError("rotated object would exit the border margin")
        annotations.append(Annotation(box, ann.label))
    return SyntheticScene(image, tuple(annotations), scene.seed)


# -- dataset files ---------------------------------------------------------

def save_dataset(path, scenes) -> None:
    """Header JSON line, then per scene a binary tensor and a JSON line."""
    scenes = list(scenes)
    side = scenes[0].side if scenes else 0
    channels = scenes[0].image.shape[0] if scenes else 0
    header = {"version": DATASET_VERSION, "side": side, "count": len(scenes), "channels": channels}
    with open(path, "wb") as fh:
        fh.write((json.dumps(header) + "\n").encode())
        for scene in scenes:
            write_tensor(fh, scene.image)
            record = {"seed": scene.seed, "annotations": [a.to_dict() for a in scene.annotations]}
            fh.write((json.dumps(record) + "\n").encode())


def load_dataset(path) -> list[SyntheticScene]:
    with open(Path(path), "rb") as fh:
        line = fh.readline()
        try:
            header = json.loads(line)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise FormatError("bad magic") from exc
        if not isinstance(header, dict) or header.get("version") != DATASET_VERSION:
            raise FormatError(f"unsupported dataset version {header.get('version') if isinstance(header, dict) else None!r}")
        scenes = []
        for _ in range(header["count"]):
            image = read_tensor(fh)
            line = fh.readline()
            if not line.endswith(b"\n"):
                raise FormatError("truncated dataset record")
            record = json.loads(line)
            anns = tuple(Annotation.from_dict(d) for d in record["annotations"])
            scenes.append(SyntheticScene(image, anns, record["seed"]))
        if fh.read(1):
            raise FormatError("trailing data after last scene")
    return scenes


def export_png(scene: SyntheticScene, path) -> None:
    """Save the first channel as an 8-bit grayscale PNG (needs Pillow)."""
    from PIL import Image

    img = np.clip(scene.image[0], 0, 1)
    Image.fromarray((img * 255).round().astype(np.uint8)).save(path)
