"""Planar tensor kernels: bilinear sampling, rotation, convolution, pooling.

A planar tensor is a ``numpy`` array of shape ``(C, H, W)``; any leading
axes in front of ``(H, W)`` are treated as channels by the geometric kernels.

Coordinates: ``x`` is the column, ``y`` the row, origin at the top-left pixel
centre.  A rotation by ``angle`` moves image content counter-clockwise as it
appears on screen (the ``np.rot90`` direction).  Because +y points down, the
point map is::

    [x']   [ cos a   sin a] [x]
    [y'] = [-sin a   cos a] [y]

relative to the rotation centre.  :func:`rotation_matrix` is the only place
this sign lives.
"""

from __future__ import annotations

import io
import math
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np
from scipy import sparse

MAGIC = b"RGT1"


class FormatError(ValueError):
    """Raised when a serialized tensor or dataset cannot be decoded."""


def rotation_matrix(angle: float) -> np.ndarray:
    """Point map for a counter-clockwise (on screen) rotation by ``angle``.

    Multiples of pi/2 are snapped to exact integer entries so that quarter
    turns are exact index permutations.
    """
    quarter = angle / (math.pi / 2)
    k = round(quarter)
    if abs(quarter - k) < 1e-12:
        c, s = [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)][k % 4]
    else:
        c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, s], [-s, c]])


def quarter_turns(angle: float) -> int | None:
    """Return ``k`` if ``angle`` is ``k * pi/2`` (mod 2pi), else ``None``."""
    quarter = angle / (math.pi / 2)
    k = round(quarter)
    if abs(quarter - k) < 1e-12:
        return k % 4
    return None


def geometric_center(height: int, width: int) -> tuple[float, float]:
    return ((width - 1) / 2.0, (height - 1) / 2.0)


def bilinear_weights(xs, ys, height: int, width: int):
    """Flat indices and weights of the four bilinear neighbours.

    Returns ``(idx, w)`` each of shape ``xs.shape + (4,)``.  Neighbours that
    fall outside the grid get weight 0 (zero padding) and a clamped index.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    x0 = np.floor(xs)
    y0 = np.floor(ys)
    fx = xs - x0
    fy = ys - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    cols = np.stack([x0, x0 + 1, x0, x0 + 1], axis=-1)
    rows = np.stack([y0, y0, y0 + 1, y0 + 1], axis=-1)
    w = np.stack(
        [(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=-1
    )
    inside = (cols >= 0) & (cols < width) & (rows >= 0) & (rows < height)
    w = np.where(inside, w, 0.0)
    idx = np.clip(rows, 0, height - 1) * width + np.clip(cols, 0, width - 1)
    return idx, w


def sampling_matrix(xs, ys, height: int, width: int) -> sparse.csr_matrix:
    """Sparse ``(len(xs), H*W)`` operator whose rows bilinearly sample a map."""
    idx, w = bilinear_weights(np.ravel(xs), np.ravel(ys), height, width)
    n = idx.shape[0]
    rows = np.repeat(np.arange(n), 4)
    return sparse.csr_matrix(
        (w.ravel(), (rows, idx.ravel())), shape=(n, height * width)
    )


def bilinear_sample(t: np.ndarray, c: int, x: float, y: float) -> float:
    """Bilinear interpolation of channel ``c`` at real coordinate ``(x, y)``."""
    t = np.asarray(t)
    if not 0 <= c < t.shape[0]:
        raise IndexError("channel out of range")
    height, width = t.shape[-2:]
    idx, w = bilinear_weights(x, y, height, width)
    plane = t[c].ravel()
    # zero-weight neighbours are skipped so exact grid points reproduce the
    # stored value bit for bit
    return float(sum(wi * plane[i] for i, wi in zip(idx, w) if wi != 0.0))


def _rotation_coords(height, width, angle, center):
    cx, cy = center
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    inv = rotation_matrix(-angle)
    dx, dy = xs - cx, ys - cy
    sx = inv[0, 0] * dx + inv[0, 1] * dy + cx
    sy = inv[1, 0] * dx + inv[1, 1] * dy + cy
    return sx, sy


def rotation_operator(height, width, angle, center=None) -> sparse.csr_matrix:
    """Sparse operator ``S`` with ``rotate(t).ravel() == S @ t.ravel()``."""
    if center is None:
        center = geometric_center(height, width)
    sx, sy = _rotation_coords(height, width, angle, center)
    return sampling_matrix(sx, sy, height, width)


def rotate_planar(t: np.ndarray, angle: float, center=None) -> np.ndarray:
    """Rotate every channel of ``t`` by ``angle`` about ``center``.

    Inverse-mapping warp with bilinear sampling and zero padding.  Quarter
    turns about the geometric centre are exact index permutations.
    """
    t = np.asarray(t)
    if not math.isfinite(angle):
        raise ValueError("angle must be finite")
    height, width = t.shape[-2:]
    geo = geometric_center(height, width)
    k = quarter_turns(angle)
    if k is not None and (center is None or tuple(center) == geo):
        if height == width or k % 2 == 0:
            return np.rot90(t, k, axes=(-2, -1)).copy()
    op = rotation_operator(height, width, angle, geo if center is None else center)
    flat = t.reshape(-1, height * width)
    out = (op @ flat.T).T
    return np.ascontiguousarray(out.reshape(t.shape)).astype(t.dtype, copy=False)


def _check_conv_args(t, filters):
    if filters.ndim != 4:
        raise ValueError("filters must have shape (C_out, C_in, kH, kW)")
    if filters.shape[1] != t.shape[-3]:
        raise ValueError(
            f"channel mismatch: input has {t.shape[-3]}, filters expect {filters.shape[1]}"
        )
    kh, kw = filters.shape[-2:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("even kernel size is not supported")


def _im2col(x, kh, kw, stride, ho, wo):
    """``(C*kh*kw, B*ho*wo)`` patch matrix of a padded ``(B, C, H, W)`` input."""
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, : stride * ho : stride, : stride * wo : stride]
    b, c = x.shape[:2]
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, b * ho * wo)


def _out_size(h, wd, kh, kw, stride, padding):
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError("kernel larger than padded input")
    return ho, wo


def conv2d_forward(x, w, stride=1, padding=0):
    """Batched cross-correlation: ``x`` (B, C, H, W), ``w`` (O, C, k, k)."""
    b, _, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho, wo = _out_size(h, wd, kh, kw, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = w.reshape(o, -1) @ _im2col(x, kh, kw, stride, ho, wo)
    return out.reshape(o, b, ho, wo).transpose(1, 0, 2, 3)


def conv2d_backward(x, w, grad, stride=1, padding=0):
    """Gradients of :func:`conv2d_forward` w.r.t. input and filters."""
    b, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho, wo = grad.shape[-2:]
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    g2 = grad.transpose(1, 0, 2, 3).reshape(o, b * ho * wo)
    gw = (g2 @ _im2col(x, kh, kw, stride, ho, wo).T).reshape(w.shape)
    gcols = (w.reshape(o, -1).T @ g2).reshape(c, kh, kw, b, ho, wo)
    gx = np.zeros((b, c) + x.shape[2:], dtype=np.result_type(x, grad))
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += \
                gcols[:, i, j].transpose(1, 0, 2, 3)
    if padding:
        gx = gx[:, :, padding : padding + h, padding : padding + wd]
    return gx, gw.astype(gx.dtype, copy=False)


def conv2d_plain(t, filters, stride: int = 1, padding: int = 0, bias=None):
    """Zero-padded cross-correlation of a planar tensor (C, H, W)."""
    t = np.asarray(t)
    filters = np.asarray(filters)
    _check_conv_args(t, filters)
    if stride < 1:
        raise ValueError("stride must be >= 1")
    out = conv2d_forward(t[None], filters, stride, padding)[0]
    if bias is not None:
        out = out + np.asarray(bias)[:, None, None]
    return out


def maxpool2d(t, window: int = 2, stride: int = 2) -> np.ndarray:
    t = np.asarray(t)
    h, w = t.shape[-2:]
    if h % stride or w % stride:
        raise ValueError(f"spatial size {h}x{w} not divisible by stride {stride}")
    if window == stride:
        shaped = t.reshape(t.shape[:-2] + (h // stride, stride, w // stride, stride))
        return shaped.max(axis=(-3, -1))
    pad = [(0, 0)] * (t.ndim - 2) + [(0, window - stride)] * 2
    padded = np.pad(t, pad, constant_values=-np.inf)
    view = np.lib.stride_tricks.sliding_window_view(padded, (window, window), axis=(-2, -1))
    return view[..., ::stride, ::stride, :, :].max(axis=(-2, -1))


def upsample_nearest(t, factor: int = 2) -> np.ndarray:
    if factor < 1:
        raise ValueError("factor must be >= 1")
    t = np.asarray(t)
    return np.repeat(np.repeat(t, factor, axis=-2), factor, axis=-1)


def upsample_matrix(n: int, factor: int = 2) -> np.ndarray:
    """``(factor*n, n)`` linear-interpolation matrix with half-pixel centres.

    Output sample ``i`` sits at input coordinate ``(i + 0.5)/factor - 0.5``,
    clamped to the valid range, so the operator is mirror symmetric and
    commutes with quarter turns.
    """
    pos = np.clip((np.arange(factor * n) + 0.5) / factor - 0.5, 0, n - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = pos - lo
    mat = np.zeros((factor * n, n))
    rows = np.arange(factor * n)
    np.add.at(mat, (rows, lo), 1 - frac)
    np.add.at(mat, (rows, hi), frac)
    return mat


def upsample_bilinear(t, factor: int = 2) -> np.ndarray:
    if factor < 1:
        raise ValueError("factor must be >= 1")
    t = np.asarray(t)
    h, w = t.shape[-2:]
    return np.einsum("ih,...hw,jw->...ij", upsample_matrix(h, factor), t, upsample_matrix(w, factor))


# -- serialization ---------------------------------------------------------

def write_tensor(fh: BinaryIO, arr) -> None:
    """Append ``arr`` to ``fh`` as ``RGT1`` + u32 rank + u32 dims + f64 LE data."""
    arr = np.asarray(arr, dtype="<f8")
    fh.write(MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr).tobytes())


def _read_exact(fh, n):
    data = fh.read(n)
    if len(data) != n:
        raise FormatError("truncated tensor data")
    return data


def read_tensor(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != MAGIC:
        if len(magic) < 4:
            raise FormatError("truncated tensor data")
        raise FormatError("bad magic")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4))
    dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
    count = math.prod(dims)
    data = _read_exact(fh, 8 * count)
    return np.frombuffer(data, dtype="<f8").reshape(dims).astype(np.float64)


def tensor_to_bytes(arr) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, arr)
    return buf.getvalue()


def save_tensor(path, arr) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, arr)


def load_tensor(path) -> np.ndarray:
    with open(Path(path), "rb") as fh:
        return read_tensor(fh)
