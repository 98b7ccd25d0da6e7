"""Rotated RoI warping: spatial alignment, orientation alignment, pooling.

RoI boxes are given in image pixels.  A feature level with stride ``s``
maps image coordinate ``x`` to ``(x + 0.5)/s - 0.5``, which keeps the image
centre on the level centre so rotations about the two agree.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse

from . import functional as F
from .autodiff import Var, as_var
from .group import TWO_PI, RegularField, RRoI, normalize_angle
from .tensor import rotation_matrix, sampling_matrix, write_tensor

SPATIAL = "spatial-only"
ALIGNED = "orientation-aligned"
POOLED = "orientation-pooled"


@dataclass(frozen=True)
class AlignSpec:
    output_size: int = 7
    sampling_ratio: int = 2
    interp: int = 2

    def __post_init__(self):
        if self.output_size < 1:
            raise ValueError("output_size must be >= 1")
        if self.sampling_ratio < 1:
            raise ValueError("sampling_ratio must be >= 1")
        if self.interp not in (1, 2, 4):
            raise ValueError("interp (l) must be one of 1, 2, 4")


@dataclass(frozen=True)
class AlignedRoIFeature:
    values: np.ndarray  # (K, N, s, s)
    tag: str = SPATIAL
    theta: float = 0.0

    def __post_init__(self):
        if self.tag not in (SPATIAL, ALIGNED, POOLED):
            raise ValueError(f"unknown alignment tag {self.tag!r}")
        values = np.asarray(self.values)
        if values.ndim != 4:
            raise ValueError("RoI feature needs 4 axes (K, N, s, s)")
        if self.tag == POOLED and values.shape[1] != 1:
            raise ValueError("orientation-pooled features have a single orientation")
        object.__setattr__(self, "values", values)

    @property
    def K(self):
        return self.values.shape[0]

    @property
    def N(self):
        return self.values.shape[1]

    @property
    def s(self):
        return self.values.shape[2]


def _check_box(b: RRoI):
    if not (b.w > 0 and b.h > 0):
        raise ValueError("degenerate RRoI")


def rroi_sample_points(b: RRoI, spec: AlignSpec, stride: float = 1.0):
    """Sample coordinates ``(xs, ys)`` of shape ``(s, s, n*n)`` on a level.

    Axis 0 runs along the box height, axis 1 along its width; the last axis
    holds the ``n x n`` samples of each bin at its ``(a + 0.5)/n`` offsets.
    """
    _check_box(b)
    s, n = spec.output_size, spec.sampling_ratio
    frac = (np.arange(s)[:, None] + (np.arange(n)[None, :] + 0.5) / n).ravel() / s - 0.5
    u = (frac * b.w).reshape(s, n)
    v = (frac * b.h).reshape(s, n)
    uu = np.broadcast_to(u[None, :, None, :], (s, s, n, n))
    vv = np.broadcast_to(v[:, None, :, None], (s, s, n, n))
    rot = rotation_matrix(b.theta)
    xs = b.x + rot[0, 0] * uu + rot[0, 1] * vv
    ys = b.y + rot[1, 0] * uu + rot[1, 1] * vv
    xs = (xs + 0.5) / stride - 0.5
    ys = (ys + 0.5) / stride - 0.5
    return xs.reshape(s, s, n * n), ys.reshape(s, s, n * n)


def rroi_operator(b: RRoI, height: int, width: int, spec: AlignSpec,
                  stride: float = 1.0) -> sparse.csr_matrix:
    """Sparse ``(s*s, H*W)`` operator averaging bilinear samples per bin."""
    xs, ys = rroi_sample_points(b, spec, stride)
    per_sample = sampling_matrix(xs, ys, height, width)
    count = spec.sampling_ratio ** 2
    bins = np.repeat(np.arange(spec.output_size ** 2), count)
    pool = sparse.csr_matrix(
        (np.full(bins.size, 1.0 / count), (bins, np.arange(bins.size))),
        shape=(spec.output_size ** 2, bins.size),
    )
    return (pool @ per_sample).tocsr()


def rroi_align_spatial(f: RegularField, b: RRoI, spec: AlignSpec = AlignSpec(),
                       stride: float = 1.0) -> AlignedRoIFeature:
    """Warp the rotated box into an ``s x s`` grid, channel by channel."""
    _check_box(b)
    k, n, h, w = f.values.shape
    op = rroi_operator(b, h, w, spec, stride)
    flat = f.values.reshape(k * n, h * w)
    out = np.asarray((op @ flat.T).T).reshape(k, n, spec.output_size, spec.output_size)
    return AlignedRoIFeature(out, SPATIAL, b.theta)


def _keys_cubic(x: float, a: float = -0.5) -> float:
    x = abs(x)
    if x <= 1:
        return (a + 2) * x ** 3 - (a + 3) * x ** 2 + 1
    if x < 2:
        return a * x ** 3 - 5 * a * x ** 2 + 8 * a * x - 4 * a
    return 0.0


def interp_weights(alpha: float, l: int) -> dict[int, float]:
    """Weights over channel offsets relative to the switched channel ``i``."""
    if l == 1:
        return {0: 1.0}
    if l == 2:
        return {0: 1.0 - alpha, 1: alpha}
    if l == 4:
        raw = {m: _keys_cubic(m - alpha) for m in (-1, 0, 1, 2)}
        total = sum(raw.values())
        return {m: w / total for m, w in raw.items()}
    raise ValueError("interp (l) must be one of 1, 2, 4")


def orientation_matrix(theta: float, order: int, l: int) -> np.ndarray:
    """``(N, N)`` matrix ``W`` with ``out[i] = sum_j W[i, j] * in[j]``.

    ``r = floor(theta*N/2pi)`` switches channel ``r`` to the front and the
    fractional part ``alpha`` interpolates between neighbouring channels.
    """
    theta = normalize_angle(theta)
    pos = theta * order / TWO_PI
    r = min(int(math.floor(pos)), order - 1)
    alpha = pos - r
    mat = np.zeros((order, order))
    weights = interp_weights(alpha, l)
    for i in range(order):
        for m, wm in weights.items():
            mat[i, (i + r + m) % order] += wm
    return mat


def orientation_align(fr: AlignedRoIFeature, theta: float,
                      spec: AlignSpec = AlignSpec()) -> AlignedRoIFeature:
    if fr.tag != SPATIAL:
        raise ValueError(f"orientation_align needs a spatial-only feature, got {fr.tag}")
    mat = orientation_matrix(theta, fr.N, spec.interp)
    out = np.einsum("ij,kjpq->kipq", mat, fr.values)
    return AlignedRoIFeature(out, ALIGNED, normalize_angle(theta))


def riroi_align(f: RegularField, b: RRoI, spec: AlignSpec = AlignSpec(),
                stride: float = 1.0) -> AlignedRoIFeature:
    """Spatial alignment followed by orientation alignment at ``b.theta``."""
    return orientation_align(rroi_align_spatial(f, b, spec, stride), b.theta, spec)


def orientation_maxpool(fr: AlignedRoIFeature) -> AlignedRoIFeature:
    if fr.tag != SPATIAL:
        raise ValueError(f"orientation_maxpool needs a spatial-only feature, got {fr.tag}")
    return AlignedRoIFeature(fr.values.max(axis=1, keepdims=True), POOLED, fr.theta)


def save_aligned_feature(prefix, feat: AlignedRoIFeature) -> tuple[Path, Path]:
    """Write ``<prefix>.rgt`` and a ``<prefix>.json`` sidecar."""
    prefix = Path(prefix)
    tensor_path = prefix.with_suffix(".rgt")
    meta_path = prefix.with_suffix(".json")
    with open(tensor_path, "wb") as fh:
        write_tensor(fh, feat.values)
    meta = {"K": feat.K, "N": feat.N, "s": feat.s, "tag": feat.tag, "theta": feat.theta}
    meta_path.write_text(json.dumps(meta))
    return tensor_path, meta_path


# -- differentiable batched versions --------------------------------------------

def rroi_align_var(x, rois, spec: AlignSpec, stride: float = 1.0) -> Var:
    """Spatial alignment of many boxes on a batched field.

    ``x`` is ``(B, K, N, H, W)``; ``rois`` is a sequence of
    ``(batch_index, RRoI)``.  Returns ``(R, K, N, s, s)``.
    """
    x = as_var(x)
    b, k, n, h, w = x.shape
    s = spec.output_size
    blocks = []
    for bi, box in rois:
        op = rroi_operator(box, h, w, spec, stride).tocoo()
        blocks.append((op.row, op.col + bi * h * w, op.data))
    rows = np.concatenate([r + i * s * s for i, (r, _, _) in enumerate(blocks)])
    cols = np.concatenate([c for _, c, _ in blocks])
    data = np.concatenate([d for _, _, d in blocks]).astype(x.dtype)
    op = sparse.csr_matrix((data, (rows, cols)), shape=(len(rois) * s * s, b * h * w))
    flat = F.reshape(F.transpose(x, (1, 2, 0, 3, 4)), (k * n, b * h * w))
    out = F.sparse_apply(flat, op)
    out = F.reshape(out, (k, n, len(rois), s, s))
    return F.transpose(out, (2, 0, 1, 3, 4))


def orientation_align_var(feats, thetas, spec: AlignSpec) -> Var:
    """Orientation alignment of ``(R, K, N, s, s)`` features, one angle per RoI."""
    feats = as_var(feats)
    n = feats.shape[2]
    mats = np.stack([orientation_matrix(t, n, spec.interp) for t in thetas]).astype(feats.dtype)
    return F.einsum("rij,rkjpq->rkipq", mats, feats)


def orientation_maxpool_var(feats) -> Var:
    return F.max_axis(feats, axis=2, keepdims=True)
