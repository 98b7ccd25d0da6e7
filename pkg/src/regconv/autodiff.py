"""Tape-based reverse-mode differentiation, parameters and SGD.

Operations in :mod:`regconv.functional` record a node on the active
:class:`Tape` whenever one of their inputs requires a gradient.  Outside a
``with Tape():`` block nothing is recorded and the ops are plain numpy.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "regconv_tape", default=None
)


class Var:
    """A numpy value that can take part in recorded computations."""

    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Var{label}(shape={self.value.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; the implementations live in functional
    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import functional as F
        return F.mul(self, -1.0)

    def sum(self, axis=None):
        from . import functional as F
        return F.sum(self, axis)

    def reshape(self, *shape):
        from . import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)


class Param(Var):
    """A trainable leaf.  ``grad`` always has the shape of ``value``."""

    __slots__ = ("momentum",)

    def __init__(self, value, name: str | None = None):
        super().__init__(np.array(value), requires_grad=True, name=name)
        self.grad = np.zeros_like(self.value)
        self.momentum = None

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)


@dataclass
class Node:
    op: str
    out: Var
    parents: tuple
    backward: Callable


class Tape:
    """Ordered record of the primitive operations evaluated while active."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._token = None

    def __enter__(self):
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def record(self, op: str, out: Var, parents: tuple, backward: Callable):
        self.nodes.append(Node(op, out, parents, backward))

    def __len__(self):
        return len(self.nodes)


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def make_node(op: str, value, parents: Sequence[Var], backward: Callable) -> Var:
    """Wrap ``value`` and record it if any parent needs a gradient.

    ``backward(grad)`` must return one gradient (or ``None``) per parent.
    """
    out = Var(value)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(op, out, tuple(parents), backward)
    return out


def backward(tape: Tape, loss: Var) -> None:
    """Populate ``.grad`` of every parameter reached from ``loss``.

    Nodes are visited once each, in reverse recording order.  Gradients of
    leaves accumulate; intermediate gradients are released after use.
    """
    if loss.value.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.value.shape}")
    for i, node in enumerate(tape.nodes):
        if not np.all(np.isfinite(node.out.value)):
            raise FloatingPointError(f"non-finite value produced by node {i} ({node.op})")
    if not np.isfinite(loss.value).all():
        raise FloatingPointError("loss is not finite")
    loss.grad = np.ones_like(loss.value)
    for i in range(len(tape.nodes) - 1, -1, -1):
        node = tape.nodes[i]
        g = node.out.grad
        if g is None:
            continue
        grads = node.backward(g)
        for parent, pg in zip(node.parents, grads):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg)
            if not np.all(np.isfinite(pg)):
                raise FloatingPointError(f"non-finite gradient flowing out of node {i} ({node.op})")
            if parent.grad is None:
                parent.grad = pg.copy() if pg.base is not None else pg
            else:
                parent.grad = parent.grad + pg
        if node.out is not loss:
            node.out.grad = None


def sgd_step(params: Sequence[Param], lr: float, momentum: float = 0.9,
             weight_decay: float = 0.0001) -> None:
    """Classic momentum SGD with L2 weight decay folded into the gradient."""
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    for p in params:
        g = p.grad + weight_decay * p.value if weight_decay else p.grad
        if momentum:
            if p.momentum is None:
                p.momentum = np.zeros_like(p.value)
            p.momentum = momentum * p.momentum + g
            step = p.momentum
        else:
            step = g
        p.value = p.value - lr * step
        p.zero_grad()


def clip_grad_norm(params: Sequence[Param], max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    grads = [p.grad for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))
    if total > max_norm:
        scale = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * np.asarray(scale, dtype=p.grad.dtype)
    return total


def grad_check(fn: Callable[[], Var], params: Sequence[Var], eps: float = 1e-5,
               samples: int = 64, seed: int = 0) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` takes no arguments and reads the current values of ``params``.
    Up to ``samples`` coordinates are drawn across all parameters (all of
    them when there are fewer); the relative error at each uses the
    denominator ``max(|analytic|, |numeric|, 1e-8)``.
    """
    for p in params:
        p.requires_grad = True
        p.grad = None
    with Tape() as tape:
        out = fn()
    backward(tape, out)
    analytic = [np.zeros_like(p.value) if p.grad is None else p.grad for p in params]

    sizes = [p.value.size for p in params]
    total = sum(sizes)
    rng = np.random.default_rng(seed)
    picks = np.arange(total) if total <= samples else rng.choice(total, samples, replace=False)
    offsets = np.cumsum([0] + sizes)

    worst = 0.0
    for flat in np.sort(picks):
        which = int(np.searchsorted(offsets, flat, side="right") - 1)
        p = params[which]
        idx = np.unravel_index(flat - offsets[which], p.value.shape)
        original = p.value[idx].copy()
        p.value = p.value.copy()
        p.value[idx] = original + eps
        f_plus = float(fn().value)
        p.value[idx] = original - eps
        f_minus = float(fn().value)
        p.value[idx] = original
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise FloatingPointError("function value is not finite")
        numeric = (f_plus - f_minus) / (2 * eps)
        a = float(analytic[which][idx])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
