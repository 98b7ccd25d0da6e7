"""Differentiable primitives.

Every function accepts :class:`~regconv.autodiff.Var` or plain arrays and
returns a ``Var``.  Backward rules are written by hand against the numpy
kernels in :mod:`regconv.tensor`.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .autodiff import Var, as_var, make_node


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return make_node(
        "add", a.value + b.value, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return make_node(
        "sub", a.value - b.value, (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return make_node(
        "mul", a.value * b.value, (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
    )


def sum(x, axis=None) -> Var:  # noqa: A001 - mirrors numpy
    x = as_var(x)
    out = x.value.sum(axis=axis)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape),)

    return make_node("sum", out, (x,), back)


def mean(x, axis=None) -> Var:
    x = as_var(x)
    count = x.value.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis), 1.0 / count)


def reshape(x, shape) -> Var:
    x = as_var(x)
    return make_node("reshape", x.value.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes) -> Var:
    x = as_var(x)
    inverse = np.argsort(axes)
    return make_node(
        "transpose", x.value.transpose(axes), (x,), lambda g: (g.transpose(inverse),)
    )


def take(x, indices, axis: int) -> Var:
    """Gather along ``axis`` with an integer index array (repeats allowed)."""
    x = as_var(x)
    indices = np.asarray(indices)
    out = np.take(x.value, indices, axis=axis)

    def back(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        moved = np.moveaxis(gx, axis, 0)
        gm = np.moveaxis(g, list(range(axis, axis + indices.ndim)), list(range(indices.ndim)))
        np.add.at(moved, indices, gm)
        return (gx,)

    return make_node("take", out, (x,), back)


def concat(xs, axis: int = 0) -> Var:
    xs = [as_var(x) for x in xs]
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return make_node(
        "concat", np.concatenate([x.value for x in xs], axis=axis), tuple(xs),
        lambda g: tuple(np.split(g, sizes, axis=axis)),
    )


def einsum(spec: str, a, b) -> Var:
    """Two-operand ``np.einsum`` without repeated or dangling indices."""
    a, b = as_var(a), as_var(b)
    inputs, out_idx = spec.replace(" ", "").split("->")
    ia, ib = inputs.split(",")
    value = np.einsum(spec, a.value, b.value, optimize=True)

    def back(g):
        ga = np.einsum(f"{out_idx},{ib}->{ia}", g, b.value, optimize=True)
        gb = np.einsum(f"{out_idx},{ia}->{ib}", g, a.value, optimize=True)
        return ga, gb

    return make_node("einsum", value, (a, b), back)


def relu(x) -> Var:
    x = as_var(x)
    mask = x.value > 0
    return make_node("relu", np.where(mask, x.value, 0.0).astype(x.dtype), (x,),
                     lambda g: (g * mask,))


def max_axis(x, axis: int, keepdims: bool = False) -> Var:
    """Max along one axis; ties route the gradient to the first maximum."""
    x = as_var(x)
    arg = np.expand_dims(x.value.argmax(axis=axis), axis)
    out = np.take_along_axis(x.value, arg, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis)

    def back(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        np.put_along_axis(gx, arg, g if keepdims else np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return make_node("max_axis", out, (x,), back)


def conv2d(x, w, bias=None, stride: int = 1, padding: int = 0) -> Var:
    """Batched cross-correlation, ``x`` (B, C, H, W), ``w`` (O, C, k, k)."""
    x, w = as_var(x), as_var(w)
    out = T.conv2d_forward(x.value, w.value, stride, padding)
    parents = [x, w]
    if bias is not None:
        bias = as_var(bias)
        out = out + bias.value[:, None, None]
        parents.append(bias)

    def back(g):
        gx, gw = T.conv2d_backward(x.value, w.value, g, stride, padding)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return make_node("conv2d", out, tuple(parents), back)


def maxpool2d(x, window: int = 2) -> Var:
    """Non-overlapping max pooling over the last two axes.

    Ties send the gradient to the first maximum in row-major scan order.
    """
    x = as_var(x)
    h, w = x.shape[-2:]
    if h % window or w % window:
        raise ValueError(f"spatial size {h}x{w} not divisible by {window}")
    lead = x.shape[:-2]
    blocks = x.value.reshape(lead + (h // window, window, w // window, window))
    blocks = np.moveaxis(blocks, -3, -2).reshape(lead + (h // window, w // window, window * window))
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(lead + (h // window, w // window, window, window))
        return (np.moveaxis(gb, -2, -3).reshape(x.shape),)

    return make_node("maxpool2d", out, (x,), back)


def upsample_nearest(x, factor: int = 2) -> Var:
    x = as_var(x)
    h, w = x.shape[-2:]

    def back(g):
        g = g.reshape(x.shape[:-2] + (h, factor, w, factor))
        return (g.sum(axis=(-3, -1)),)

    return make_node("upsample", T.upsample_nearest(x.value, factor), (x,), back)


def upsample_bilinear(x, factor: int = 2) -> Var:
    x = as_var(x)
    h, w = x.shape[-2:]
    rows = T.upsample_matrix(h, factor).astype(x.dtype)
    cols = T.upsample_matrix(w, factor).astype(x.dtype)
    return einsum("...hw,jw->...hj", einsum("ih,...hw->...iw", rows, x), cols)


def sparse_apply(x, op, op_t=None) -> Var:
    """``x`` (P, Q) times the transpose of a sparse ``op`` (M, Q) -> (P, M)."""
    x = as_var(x)
    op = op.tocsr()
    op_t = op.T.tocsr() if op_t is None else op_t
    value = (op @ x.value.T).T
    return make_node("sparse_apply", np.asarray(value), (x,),
                     lambda g: (np.asarray((op_t @ g.T).T),))


def standardize(x, axes, eps: float = 1e-5) -> Var:
    """``(x - mean) / sqrt(var + eps)`` with statistics over ``axes``."""
    x = as_var(x)
    axes = tuple(axes)
    mu = x.value.mean(axis=axes, keepdims=True)
    xc = x.value - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def back(g):
        gm = g.mean(axis=axes, keepdims=True)
        gxm = (g * xhat).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return make_node("standardize", xhat, (x,), back)


def cross_entropy(logits, labels) -> Var:
    """Mean softmax cross-entropy of (B, C) logits against integer labels."""
    logits = as_var(logits)
    labels = np.asarray(labels)
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    b = logits.shape[0]
    loss = -logp[np.arange(b), labels].mean()

    def back(g):
        p = np.exp(logp)
        p[np.arange(b), labels] -= 1.0
        return (g * p / b,)

    return make_node("cross_entropy", np.asarray(loss), (logits,), back)
