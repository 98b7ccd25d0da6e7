"""The cyclic rotation group C_N and its actions on images, fields and boxes.

Orientation channels are 0-based: channel ``k`` is tied to the rotation by
``2*pi*k/N``.  The group acts on a regular field by rotating every spatial
slice and cyclically shifting the orientation axis forward::

    (g_k . f)[c, i] = rotate(f[c, (i - k) mod N], 2*pi*k/N)

The shift direction pairs with filter expansion in :mod:`regconv.layers`
(slice ``r`` holds the base filter rotated by ``+2*pi*r/N``); the pair is
pinned by the lifting-convolution equivariance tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import geometric_center, rotate_planar, rotation_matrix

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class CyclicGroup:
    order: int

    def __post_init__(self):
        if isinstance(self.order, bool) or not isinstance(self.order, (int, np.integer)):
            raise TypeError("group order must be a positive integer")
        if self.order < 1:
            raise ValueError("group order must be a positive integer")

    def _check(self, k):
        if not 0 <= k < self.order:
            raise ValueError(f"element {k} out of range for C_{self.order}")

    def compose(self, a: int, b: int) -> int:
        self._check(a)
        self._check(b)
        return (a + b) % self.order

    def inverse(self, a: int) -> int:
        self._check(a)
        return (-a) % self.order

    def angle_of(self, a: int) -> float:
        self._check(a)
        return TWO_PI * a / self.order

    def elements(self) -> range:
        return range(self.order)


@dataclass(frozen=True)
class RRoI:
    """Rotated box: centre ``(x, y)``, size ``(w, h)`` and angle ``theta``.

    ``theta`` is normalized into ``[0, 2*pi)``.  The box's width axis points
    along ``rotation_matrix(theta) @ (1, 0)``.
    """

    x: float
    y: float
    w: float
    h: float
    theta: float = 0.0

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError("degenerate RRoI")
        object.__setattr__(self, "theta", normalize_angle(self.theta))

    def as_tuple(self):
        return (self.x, self.y, self.w, self.h, self.theta)

    def corners(self) -> np.ndarray:
        """The four corners as a (4, 2) array of (x, y)."""
        rot = rotation_matrix(self.theta)
        local = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]]) * [self.w / 2, self.h / 2]
        return local @ rot.T + [self.x, self.y]


def normalize_angle(theta: float) -> float:
    theta = math.fmod(theta, TWO_PI)
    if theta < 0:
        theta += TWO_PI
    # fmod of a value just below 0 can round up to exactly 2*pi
    return 0.0 if theta >= TWO_PI else theta


@dataclass(frozen=True)
class RegularField:
    """A ``(K, N, H, W)`` feature tensor whose orientation axis is indexed by C_N."""

    values: np.ndarray
    group: CyclicGroup = field(default_factory=lambda: CyclicGroup(1))

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 4:
            raise ValueError(f"regular field needs 4 axes (K, N, H, W), got {values.shape}")
        if values.shape[1] != self.group.order:
            raise ValueError(
                f"orientation axis has {values.shape[1]} channels, group order is {self.group.order}"
            )
        object.__setattr__(self, "values", values)

    @property
    def shape(self):
        return self.values.shape

    @property
    def K(self):
        return self.values.shape[0]

    @property
    def N(self):
        return self.values.shape[1]


def act_on_field(f: RegularField, k: int) -> RegularField:
    """Apply group element ``k``: spatial rotation plus cyclic channel shift."""
    group = f.group
    if not 0 <= k < group.order:
        raise ValueError(f"element {k} out of range for C_{group.order}")
    h, w = f.values.shape[-2:]
    if h != w:
        raise ValueError("act_on_field needs a square field")
    shifted = np.roll(f.values, k, axis=1)
    if k == 0:
        return RegularField(shifted.copy(), group)
    return RegularField(rotate_planar(shifted, group.angle_of(k)), group)


def rotate_field(f: RegularField, angle: float, shift: int = 0) -> RegularField:
    """Rotate a field spatially by an arbitrary angle and roll orientations by ``shift``."""
    values = np.roll(f.values, shift, axis=1) if shift else f.values
    return RegularField(rotate_planar(values, angle), f.group)


def act_on_rroi(b: RRoI, angle: float, image_center=(0.0, 0.0)) -> RRoI:
    """Move a box with the image when the image is rotated by ``angle``."""
    if not math.isfinite(angle):
        raise ValueError("angle must be finite")
    cx, cy = image_center
    rot = rotation_matrix(angle)
    dx, dy = b.x - cx, b.y - cy
    x = rot[0, 0] * dx + rot[0, 1] * dy + cx
    y = rot[1, 0] * dx + rot[1, 1] * dy + cy
    return RRoI(x, y, b.w, b.h, b.theta + angle)


def image_center(side_or_shape) -> tuple[float, float]:
    if isinstance(side_or_shape, int):
        return geometric_center(side_or_shape, side_or_shape)
    h, w = side_or_shape[-2:]
    return geometric_center(h, w)
