"""Rotation-equivariant layers and a miniature ResNet/FPN backbone.

Inside the network a regular field travels as a ``Var`` of shape
``(B, K, N, H, W)``.  The functional wrappers at the bottom of this module
(``lift_forward``, ``gconv_forward``, ...) take and return unbatched
:class:`~regconv.group.RegularField` values for callers that only need numpy.

Filter expansion convention: output orientation ``r`` uses the base filter
rotated by ``+2*pi*r/N`` (see :func:`filter_rotation_matrices`), which pairs
with the forward channel shift in :func:`regconv.group.act_on_field`.
"""

from __future__ import annotations

import functools
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import functional as F
from .autodiff import Param, Var, as_var
from .group import CyclicGroup, RegularField
from .tensor import bilinear_weights, read_tensor, rotation_matrix, write_tensor

CHECKPOINT_FORMAT = "regconv-ckpt-v1"


@functools.lru_cache(maxsize=None)
def filter_rotation_matrices(kernel_size: int, order: int) -> np.ndarray:
    """``(N, k*k, k*k)`` matrices; ``R[r] @ vec(psi)`` rotates psi by 2*pi*r/N.

    A filter weighs input positions, so it is rotated by pushing each tap to
    its rotated position and splatting it onto the four bilinear neighbours.
    This keeps the filter sum and first moments.  Quarter turns reduce to
    exact permutations.  For groups with other angles the base filter is
    first cut to the disk of radius ``(k - 1) / 2``: taps inside it always
    land inside the ``k x k`` support.
    """
    if kernel_size % 2 == 0:
        raise ValueError("even kernel size is not supported")
    k = kernel_size
    c = (k - 1) / 2
    yy, xx = np.mgrid[0:k, 0:k] - c
    dx, dy = xx.ravel(), yy.ravel()
    keep = np.ones(k * k, dtype=bool)
    if 4 % order:
        keep = np.hypot(dx, dy) <= c + 1e-9
    src = np.flatnonzero(keep)
    mats = np.zeros((order, k * k, k * k))
    for r in range(order):
        rot = rotation_matrix(2 * math.pi * r / order)
        qx = rot[0, 0] * dx[src] + rot[0, 1] * dy[src] + c
        qy = rot[1, 0] * dx[src] + rot[1, 1] * dy[src] + c
        idx, w = bilinear_weights(qx, qy, k, k)
        np.add.at(mats[r], (idx, np.repeat(src[:, None], 4, axis=1)), w)
    mats.setflags(write=False)
    return mats


class Module:
    """Minimal parameter container with recursive discovery."""

    training = False

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, (Module, Param)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Module, Param)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = ""):
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Param):
                yield full, value
            else:
                yield from value.named_parameters(full + ".")

    def parameters(self) -> list[Param]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")

    def modules(self):
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)


def count_params(module: Module) -> int:
    return int(sum(p.value.size for p in module.parameters()))


def _check_kernel(kernel_size):
    if kernel_size % 2 == 0:
        raise ValueError("even kernel size is not supported")


class LiftConv(Module):
    """Lifting convolution: planar image ``(B, C, H, W)`` to a regular field."""

    def __init__(self, in_channels, out_fields, group: CyclicGroup, kernel_size=3,
                 stride=1, padding=None, bias=False, rng=None, dtype=np.float64, name="lift"):
        _check_kernel(kernel_size)
        rng = np.random.default_rng(0) if rng is None else rng
        self.group = group
        self.in_channels = in_channels
        self.out_fields = out_fields
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        std = math.sqrt(2.0 / (in_channels * kernel_size * kernel_size))
        shape = (out_fields, in_channels, kernel_size, kernel_size)
        self.weight = Param(rng.normal(0.0, std, shape).astype(dtype), name=f"{name}.weight")
        self.bias = Param(np.zeros(out_fields, dtype), name=f"{name}.bias") if bias else None

    def expanded(self) -> Var:
        """Filter bank of shape ``(K_out, N, C_in, k, k)``."""
        n, k = self.group.order, self.kernel_size
        rot = filter_rotation_matrices(k, n).astype(self.weight.dtype)
        w = F.reshape(self.weight, (self.out_fields, self.in_channels, k * k))
        e = F.einsum("rpq,ocq->orcp", rot, w)
        return F.reshape(e, (self.out_fields, n, self.in_channels, k, k))

    def __call__(self, x) -> Var:
        x = as_var(x)
        if x.shape[1] != self.in_channels:
            raise ValueError(
                f"channel mismatch: input has {x.shape[1]}, layer expects {self.in_channels}"
            )
        n, k = self.group.order, self.kernel_size
        w = F.reshape(self.expanded(), (self.out_fields * n, self.in_channels, k, k))
        bias = None
        if self.bias is not None:
            bias = F.take(self.bias, np.repeat(np.arange(self.out_fields), n), axis=0)
        out = F.conv2d(x, w, bias, self.stride, self.padding)
        b, _, h, wd = out.shape
        return F.reshape(out, (b, self.out_fields, n, h, wd))


class GConv(Module):
    """Group convolution between regular fields ``(B, K_in, N, H, W)``."""

    def __init__(self, in_fields, out_fields, group: CyclicGroup, kernel_size=3,
                 stride=1, padding=None, bias=False, rng=None, dtype=np.float64, name="gconv"):
        _check_kernel(kernel_size)
        rng = np.random.default_rng(0) if rng is None else rng
        n = group.order
        self.group = group
        self.in_fields = in_fields
        self.out_fields = out_fields
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        std = math.sqrt(2.0 / (in_fields * n * kernel_size * kernel_size))
        shape = (out_fields, in_fields, n, kernel_size, kernel_size)
        self.weight = Param(rng.normal(0.0, std, shape).astype(dtype), name=f"{name}.weight")
        self.bias = Param(np.zeros(out_fields, dtype), name=f"{name}.bias") if bias else None
        r = np.arange(n)[:, None]
        j = np.arange(n)[None, :]
        self._shift = (j - r) % n

    def expanded(self) -> Var:
        """Filter bank of shape ``(K_out, N, K_in, N, k, k)``.

        ``[:, r, :, j]`` is the base filter for input orientation
        ``(j - r) mod N``, rotated by ``2*pi*r/N``.
        """
        n, k = self.group.order, self.kernel_size
        rot = filter_rotation_matrices(k, n).astype(self.weight.dtype)
        shifted = F.take(self.weight, self._shift, axis=2)  # (O, I, r, j, k, k)
        shifted = F.reshape(shifted, (self.out_fields, self.in_fields, n, n, k * k))
        e = F.einsum("rpq,oirjq->orijp", rot, shifted)
        return F.reshape(e, (self.out_fields, n, self.in_fields, n, k, k))

    def __call__(self, x) -> Var:
        x = as_var(x)
        n, k = self.group.order, self.kernel_size
        if x.ndim != 5 or x.shape[1] != self.in_fields or x.shape[2] != n:
            raise ValueError(
                f"field shape {x.shape} does not match layer (K_in={self.in_fields}, N={n})"
            )
        b, _, _, h, wd = x.shape
        w = F.reshape(self.expanded(), (self.out_fields * n, self.in_fields * n, k, k))
        bias = None
        if self.bias is not None:
            bias = F.take(self.bias, np.repeat(np.arange(self.out_fields), n), axis=0)
        out = F.conv2d(F.reshape(x, (b, self.in_fields * n, h, wd)), w, bias,
                       self.stride, self.padding)
        return F.reshape(out, (b, self.out_fields, n) + out.shape[-2:])


class GroupBatchNorm(Module):
    """Batch norm with statistics shared over the orientation axis.

    In training mode batches of at least ``min_batch`` samples use batch
    statistics over ``(B, N, H, W)``; smaller batches fall back to
    per-sample statistics over ``(N, H, W)``.  Evaluation uses running
    statistics, which keeps the layer a pointwise affine map.
    """

    def __init__(self, fields, eps=1e-5, momentum=0.1, min_batch=8, dtype=np.float64, name="gbn"):
        self.fields = fields
        self.eps = eps
        self.momentum = momentum
        self.min_batch = min_batch
        self.gamma = Param(np.ones(fields, dtype), name=f"{name}.gamma")
        self.beta = Param(np.zeros(fields, dtype), name=f"{name}.beta")
        self.running_mean = np.zeros(fields, dtype)
        self.running_var = np.ones(fields, dtype)

    def named_buffers(self, prefix=""):
        yield f"{prefix}running_mean", self
        yield f"{prefix}running_var", self

    def __call__(self, x) -> Var:
        x = as_var(x)
        if x.ndim != 5 or x.shape[1] != self.fields:
            raise ValueError(f"field shape {x.shape} does not match {self.fields} base channels")
        bshape = (1, self.fields, 1, 1, 1)
        if self.training:
            axes = (0, 2, 3, 4) if x.shape[0] >= self.min_batch else (2, 3, 4)
            xhat = F.standardize(x, axes, self.eps)
            mu = x.value.mean(axis=(0, 2, 3, 4))
            var = x.value.var(axis=axes).reshape(-1, self.fields).mean(axis=0)
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * mu
            self.running_var = (1 - m) * self.running_var + m * var
        else:
            scale = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = F.mul(F.sub(x, self.running_mean.reshape(bshape)), scale.reshape(bshape))
        return F.add(F.mul(xhat, F.reshape(self.gamma, bshape)), F.reshape(self.beta, bshape))


class ResidualBlock(Module):
    """gconv-gbn-relu-gconv-gbn plus skip, then relu."""

    def __init__(self, in_fields, out_fields, group, kernel_size=3, rng=None,
                 dtype=np.float64, name="block"):
        kw = dict(rng=rng, dtype=dtype)
        self.conv1 = GConv(in_fields, out_fields, group, kernel_size, name=f"{name}.conv1", **kw)
        self.bn1 = GroupBatchNorm(out_fields, dtype=dtype, name=f"{name}.bn1")
        self.conv2 = GConv(out_fields, out_fields, group, kernel_size, name=f"{name}.conv2", **kw)
        self.bn2 = GroupBatchNorm(out_fields, dtype=dtype, name=f"{name}.bn2")
        self.skip = None
        if in_fields != out_fields:
            self.skip = GConv(in_fields, out_fields, group, 1, name=f"{name}.skip", **kw)

    def __call__(self, x) -> Var:
        h = F.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        skip = x if self.skip is None else self.skip(x)
        return F.relu(F.add(h, skip))


@dataclass(frozen=True)
class BackboneConfig:
    """Shape of the toy backbone.

    ``stage_widths`` lists base channels K per stage; every stage after the
    first starts with a 2x2 max pool.  An empty tuple gives the stem only.
    The top-down merge upsamples bilinearly by default; both modes commute
    exactly with quarter turns, but nearest-neighbour upsampling carries a
    half-pixel parity shift that costs accuracy under 45 degree rotations.
    """

    group_order: int = 4
    in_channels: int = 1
    stem_width: int = 8
    stage_widths: tuple = (8, 8)
    blocks_per_stage: int = 1
    fpn_width: int = 8
    kernel_size: int = 3
    stem_kernel_size: int | None = None
    upsample: str = "bilinear"

    def __post_init__(self):
        if self.upsample not in ("bilinear", "nearest"):
            raise ValueError(f"unknown upsample mode {self.upsample!r}")
        object.__setattr__(self, "stage_widths", tuple(int(w) for w in self.stage_widths))
        CyclicGroup(self.group_order)
        widths = (self.in_channels, self.stem_width, self.fpn_width, *self.stage_widths)
        if any(w < 1 for w in widths):
            raise ValueError("all widths must be >= 1")
        if self.blocks_per_stage < 0:
            raise ValueError("blocks_per_stage must be >= 0")
        _check_kernel(self.kernel_size)
        _check_kernel(self.stem_kernel_size or self.kernel_size)

    @property
    def group(self) -> CyclicGroup:
        return CyclicGroup(self.group_order)

    def plain_counterpart(self) -> "BackboneConfig":
        """Same architecture over C_1 with every width multiplied by N."""
        n = self.group_order
        return BackboneConfig(
            group_order=1,
            in_channels=self.in_channels,
            stem_width=self.stem_width * n,
            stage_widths=tuple(w * n for w in self.stage_widths),
            blocks_per_stage=self.blocks_per_stage,
            fpn_width=self.fpn_width * n,
            kernel_size=self.kernel_size,
            stem_kernel_size=self.stem_kernel_size,
            upsample=self.upsample,
        )

    def to_dict(self):
        d = asdict(self)
        d["stage_widths"] = list(self.stage_widths)
        return d


class ReBackbone(Module):
    """Lifting stem, residual stages and an FPN-style top-down merge."""

    def __init__(self, cfg: BackboneConfig, seed: int = 0, dtype=np.float64):
        rng = np.random.default_rng(seed)
        group = cfg.group
        kw = dict(rng=rng, dtype=dtype)
        self.cfg = cfg
        self.group = group
        self.stem = LiftConv(cfg.in_channels, cfg.stem_width, group,
                             cfg.stem_kernel_size or cfg.kernel_size, name="stem", **kw)
        self.stem_bn = GroupBatchNorm(cfg.stem_width, dtype=dtype, name="stem_bn")
        self.blocks = []
        self.stage_index = []
        width = cfg.stem_width
        for s, out in enumerate(cfg.stage_widths):
            if cfg.blocks_per_stage == 0 and out != width:
                raise ValueError("a stage without blocks cannot change width")
            for b in range(cfg.blocks_per_stage):
                self.blocks.append(ResidualBlock(width, out, group, cfg.kernel_size,
                                                 name=f"stage{s}.block{b}", **kw))
                self.stage_index.append(s)
                width = out
        self.lateral = [
            GConv(w, cfg.fpn_width, group, 1, bias=True, name=f"fpn.lateral{s}", **kw)
            for s, w in enumerate(cfg.stage_widths)
        ]
        self.smooth = [
            GConv(cfg.fpn_width, cfg.fpn_width, group, cfg.kernel_size, bias=True,
                  name=f"fpn.smooth{s}", **kw)
            for s in range(len(cfg.stage_widths))
        ]

    @property
    def num_levels(self) -> int:
        return max(1, len(self.cfg.stage_widths))

    def __call__(self, x) -> list[Var]:
        x = as_var(x)
        stages = len(self.cfg.stage_widths)
        side = x.shape[-1]
        if x.shape[-2] != side:
            raise ValueError("backbone input must be square")
        if stages > 1 and side % (2 ** (stages - 1)):
            raise ValueError(f"input side {side} not divisible by {2 ** (stages - 1)}")
        h = self.stem(x)
        if not stages:
            return [h]
        h = F.relu(self.stem_bn(h))
        feats = []
        for s in range(stages):
            if s > 0:
                h = F.maxpool2d(h)
            for block, idx in zip(self.blocks, self.stage_index):
                if idx == s:
                    h = block(h)
            feats.append(h)
        p = self.lateral[-1](feats[-1])
        outs = [self.smooth[-1](p)]
        for s in range(stages - 2, -1, -1):
            up = F.upsample_bilinear if self.cfg.upsample == "bilinear" else F.upsample_nearest
            p = F.add(self.lateral[s](feats[s]), up(p, 2))
            outs.insert(0, self.smooth[s](p))
        return outs


# -- functional wrappers over numpy values ----------------------------------

def _field_var(f: RegularField) -> Var:
    return Var(f.values[None])


def expand_lift_filters(layer: LiftConv) -> np.ndarray:
    return layer.expanded().value.copy()


def expand_gconv_filters(layer: GConv) -> np.ndarray:
    return layer.expanded().value.copy()


def lift_forward(img, layer: LiftConv) -> RegularField:
    img = np.asarray(img)
    out = layer(Var(img[None]))
    return RegularField(out.value[0], layer.group)


def gconv_forward(f: RegularField, layer: GConv) -> RegularField:
    if f.group != layer.group:
        raise ValueError(f"field group C_{f.group.order} does not match layer C_{layer.group.order}")
    return RegularField(layer(_field_var(f)).value[0], f.group)


def gbn_forward(f: RegularField, bn: GroupBatchNorm, training: bool = False) -> RegularField:
    previous = bn.training
    bn.training = training
    try:
        out = bn(_field_var(f))
    finally:
        bn.training = previous
    return RegularField(out.value[0], f.group)


def grelu_forward(f: RegularField) -> RegularField:
    return RegularField(np.maximum(f.values, 0.0), f.group)


def gmaxpool_forward(f: RegularField) -> RegularField:
    return RegularField(F.maxpool2d(f.values, 2).value, f.group)


def backbone_forward(img, backbone: ReBackbone) -> list[RegularField]:
    """Run the backbone on one planar image ``(C, H, W)``; one field per level."""
    outs = backbone(Var(np.asarray(img)[None]))
    return [RegularField(o.value[0], backbone.group) for o in outs]


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(path, model: Module, meta: dict | None = None, extra: dict | None = None):
    """Write ``manifest.json`` + ``tensors.bin`` into directory ``path``.

    ``extra`` maps names to arrays stored after the parameters (optimizer
    state, for example).
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    with open(path / "tensors.bin", "wb") as fh:
        for name, p in model.named_parameters():
            write_tensor(fh, p.value)
            entries.append({"name": name, "kind": "param", "shape": list(p.value.shape)})
        for name, owner in model.named_buffers():
            value = getattr(owner, name.rsplit(".", 1)[-1])
            write_tensor(fh, value)
            entries.append({"name": name, "kind": "buffer", "shape": list(value.shape)})
        for name, value in (extra or {}).items():
            write_tensor(fh, value)
            entries.append({"name": name, "kind": "extra", "shape": list(np.shape(value))})
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "group_order": getattr(model, "group", CyclicGroup(1)).order,
        "tensors": entries,
        "meta": meta or {},
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_checkpoint(path, model: Module) -> tuple[dict, dict]:
    """Restore parameters and buffers in place; return ``(meta, extra)``."""
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format')!r}")
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    extra = {}
    with open(path / "tensors.bin", "rb") as fh:
        for entry in manifest["tensors"]:
            value = read_tensor(fh)
            name = entry["name"]
            if entry["kind"] == "param":
                p = params[name]
                if p.value.shape != value.shape:
                    raise ValueError(f"shape mismatch for {name}: {value.shape} vs {p.value.shape}")
                p.value = value.astype(p.value.dtype)
            elif entry["kind"] == "buffer":
                owner = buffers[name]
                attr = name.rsplit(".", 1)[-1]
                setattr(owner, attr, value.astype(getattr(owner, attr).dtype))
            else:
                extra[name] = value
    return manifest["meta"], extra
