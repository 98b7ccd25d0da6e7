"""Measurement harness: equivariance, RoI invariance, parameter ratios, training comparison.

Every measurement uses the same interior mask: pixels at least
``ceil(H/8)`` away from each border.  Reports follow the
``regconv-report-v1`` JSON layout and are deterministic under a fixed seed.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import __version__
from . import functional as F
from .autodiff import Param, Var, grad_check
from .group import CyclicGroup, RegularField, RRoI, act_on_rroi, image_center, rotate_field
from .layers import (BackboneConfig, GConv, GroupBatchNorm, LiftConv, Module, ReBackbone,
                     backbone_forward, count_params)
from .roi import (AlignSpec, orientation_align, orientation_align_var, orientation_maxpool,
                  rroi_align_spatial, rroi_align_var)
from .synth import box_is_interior, gen_scene
from .tensor import rotate_planar

REPORT_FORMAT = "regconv-report-v1"
EPS = 1e-12

# default pass thresholds
TOLERANCES = {
    "equivariance": {4: 1e-4, 8: 7e-2},
    "equivariance_control_min": 0.1,
    "roi_invariance": {4: 1e-3, 8: 8e-2},
    "roi_control_min": 0.1,
    "ablation_fraction": 0.8,
    "param_band": 1.3,
    "gradient": 1e-4,
    "augmentation_gap": 0.10,
}


def thread_count() -> int:
    """Worker threads for independent trials, capped by ``REGCONV_THREADS``."""
    raw = os.environ.get("REGCONV_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"REGCONV_THREADS must be an integer, got {raw!r}") from None


def parallel_map(fn, items):
    items = list(items)
    workers = min(thread_count(), len(items)) or 1
    if workers == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(fn, items))


# -- error measures -------------------------------------------------------------

def interior_mask(height: int, width: int | None = None) -> np.ndarray:
    width = height if width is None else width
    m = math.ceil(height / 8)
    n = math.ceil(width / 8)
    mask = np.zeros((height, width), dtype=bool)
    mask[m:height - m, n:width - n] = True
    return mask


def relative_error(a, b, mask=None) -> float:
    """``|a - b| / max(|b|, eps)`` in L2, restricted to ``mask`` on the last two axes."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if mask is not None:
        a, b = a[..., mask], b[..., mask]
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), EPS))


def _transform_output(out, angle: float, k: int, group: CyclicGroup):
    if isinstance(out, RegularField):
        n = out.group.order
        if n not in (1, group.order):
            raise ValueError(f"C_{n} field cannot follow element {k} of C_{group.order}")
        return rotate_field(out, angle, k if n > 1 else 0).values
    return rotate_planar(np.asarray(out), angle)


def _as_list(out):
    return list(out) if isinstance(out, (list, tuple)) else [out]


def equivariance_error(model, img, k: int, group: CyclicGroup, mask=None) -> float:
    """Relative L2 distance between ``model(T_k img)`` and ``T_k model(img)``.

    ``model`` maps a planar ``(C, H, W)`` image to an array, a
    :class:`RegularField` or a list of them (one per pyramid level).  Fields
    of order N follow the group element with a channel shift; order-1
    fields and plain arrays are only rotated spatially.  ``mask`` defaults
    to the interior mask of each output.  The worst level is returned.
    """
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[-1] != img.shape[-2]:
        raise ValueError(f"expected a square (C, H, W) image, got shape {img.shape}")
    if not 0 <= k < group.order:
        raise ValueError(f"element {k} out of range for C_{group.order}")
    angle = group.angle_of(k)
    direct = _as_list(model(rotate_planar(img, angle)))
    reference = _as_list(model(img))
    if len(direct) != len(reference):
        raise ValueError("model returned a different number of outputs")
    worst = 0.0
    for d, r in zip(direct, reference):
        want = _transform_output(r, angle, k, group)
        got = d.values if isinstance(d, RegularField) else np.asarray(d)
        m = interior_mask(*got.shape[-2:]) if mask is None else mask
        worst = max(worst, relative_error(got, want, m))
    return worst


def smooth_image(rng, side: int, channels: int = 1) -> np.ndarray:
    """Gaussian-filtered noise under a soft disk window.

    Smooth, centred content is what the interpolated (non-quarter-turn)
    rotations can represent; white noise is not band limited.
    """
    sigma = side / 8
    raw = rng.standard_normal((channels, side, side))
    img = np.stack([ndimage.gaussian_filter(c, sigma) for c in raw])
    img = img / img.std()
    yy, xx = np.mgrid[0:side, 0:side] - (side - 1) / 2
    radius = side / 2 - 1
    window = np.clip((radius - np.hypot(xx, yy)) / sigma, 0.0, 1.0)
    return img * window


def random_image(rng, side: int, group: CyclicGroup, channels: int = 1) -> np.ndarray:
    """White noise when every element is a quarter turn, smooth otherwise."""
    if 4 % group.order == 0:
        return rng.standard_normal((channels, side, side))
    return smooth_image(rng, side, channels)


@dataclass
class EquivarianceReport:
    group_order: int
    errors_mean: dict
    errors_max: dict
    control_mean: dict
    control_max: dict
    trials: int
    seed: int
    mask: str = "interior: distance >= ceil(H/8) from every border"
    per_trial: list = field(default_factory=list)
    control_per_trial: list = field(default_factory=list)

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trial count must be >= 1")

    @property
    def max_error(self) -> float:
        return max(self.errors_max.values())

    @property
    def min_control(self) -> float:
        """Smallest per-trial control error (worst element per trial)."""
        return min(self.control_per_trial) if self.control_per_trial else float("nan")

    def beats_control_every_trial(self) -> bool:
        return all(e < c for e, c in zip(self.per_trial, self.control_per_trial))


def _model_fn(backbone):
    return lambda img: backbone_forward(img, backbone)


def default_backbone_config(group_order: int) -> BackboneConfig:
    return BackboneConfig(group_order=group_order)


def equivariance_suite(group_order: int = 4, trials: int = 20, seed: int = 0, side: int = 64,
                       cfg: BackboneConfig | None = None, dtype=np.float64) -> EquivarianceReport:
    """Equivariant backbone against its plain counterpart on random inputs."""
    cfg = cfg or default_backbone_config(group_order)
    if cfg.group_order != group_order:
        cfg = replace(cfg, group_order=group_order)
    group = cfg.group
    model = _model_fn(ReBackbone(cfg, seed=seed, dtype=dtype).eval())
    control = _model_fn(ReBackbone(cfg.plain_counterpart(), seed=seed, dtype=dtype).eval())
    rng = np.random.Generator(np.random.Philox(seed))
    images = [random_image(rng, side, group, cfg.in_channels).astype(dtype) for _ in range(trials)]

    def trial(img):
        e = [equivariance_error(model, img, k, group) for k in group.elements()]
        c = [equivariance_error(control, img, k, group) for k in group.elements()]
        return e, c

    results = parallel_map(trial, images)
    errs = np.array([r[0] for r in results])
    ctrl = np.array([r[1] for r in results])
    ks = list(group.elements())
    return EquivarianceReport(
        group_order=group.order,
        errors_mean={k: float(errs[:, i].mean()) for i, k in enumerate(ks)},
        errors_max={k: float(errs[:, i].max()) for i, k in enumerate(ks)},
        control_mean={k: float(ctrl[:, i].mean()) for i, k in enumerate(ks)},
        control_max={k: float(ctrl[:, i].max()) for i, k in enumerate(ks)},
        trials=trials,
        seed=seed,
        per_trial=[float(x) for x in errs.max(axis=1)],
        control_per_trial=[float(x) for x in ctrl[:, 1:].max(axis=1)] if len(ks) > 1 else [0.0] * trials,
    )


# -- RoI invariance ------------------------------------------------------------------

MODES = ("spatial", "maxpool", "riroi-l1", "riroi-l2", "riroi-l4")


class RoIPipeline:
    """Backbone plus one RoI warping mode on the finest pyramid level."""

    def __init__(self, backbone: ReBackbone, mode: str = "riroi-l2", spec: AlignSpec | None = None):
        if mode not in MODES:
            raise ValueError(f"unknown alignment mode {mode!r}")
        self.backbone = backbone
        self.mode = mode
        self.spec = spec or AlignSpec()
        if mode.startswith("riroi"):
            self.spec = replace(self.spec, interp=int(mode[-1]))

    @property
    def group(self) -> CyclicGroup:
        return self.backbone.group

    def features(self, image) -> RegularField:
        return backbone_forward(image, self.backbone)[0]

    def align(self, field_: RegularField, b: RRoI) -> np.ndarray:
        spatial = rroi_align_spatial(field_, b, self.spec)
        if self.mode == "spatial":
            return spatial.values
        if self.mode == "maxpool":
            return orientation_maxpool(spatial).values
        return orientation_align(spatial, b.theta, self.spec).values

    def __call__(self, image, b: RRoI) -> np.ndarray:
        return self.align(self.features(image), b)


@dataclass(frozen=True)
class RoIInvariance:
    cv: float
    max_pairwise: float
    mean_pairwise: float


def _pairwise(feats):
    errs = []
    for i, a in enumerate(feats):
        for b in feats[i + 1:]:
            errs.append(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), EPS))
    return errs


def rotated_views(image, b: RRoI, group: CyclicGroup):
    """The image and box under every element of ``group``."""
    side = image.shape[-1]
    if not box_is_interior(b, side):
        raise ValueError("object not interior")
    center = image_center(side)
    views = []
    for k in group.elements():
        angle = group.angle_of(k)
        rb = act_on_rroi(b, angle, center)
        if not box_is_interior(rb, side):
            raise ValueError("object not interior")
        views.append((rotate_planar(image, angle) if k else np.array(image), rb))
    return views


def invariance_from_features(feats) -> RoIInvariance:
    feats = [np.asarray(f, dtype=np.float64).ravel() for f in feats]
    norms = np.array([np.linalg.norm(f) for f in feats])
    cv = float(norms.std() / max(norms.mean(), EPS))
    errs = _pairwise(feats)
    if not errs:
        return RoIInvariance(cv, 0.0, 0.0)
    return RoIInvariance(cv, float(max(errs)), float(np.mean(errs)))


def roi_invariance_error(pipeline, scene, b: RRoI | None = None, group: CyclicGroup | None = None) -> RoIInvariance:
    """Spread of RoI features over the ``N`` rotated copies of a scene.

    ``pipeline(image, box)`` returns a feature array.  The coefficient of
    variation is taken over the feature norms; pairwise errors divide by the
    larger of the two norms.
    """
    group = group or getattr(pipeline, "group", CyclicGroup(1))
    if b is None:
        b = scene.annotations[0].box
    image = scene.image if hasattr(scene, "image") else np.asarray(scene)
    return invariance_from_features([pipeline(img, rb) for img, rb in rotated_views(image, b, group)])


def mode_invariance(backbone: ReBackbone, scene, modes=MODES, spec: AlignSpec | None = None,
                    b: RRoI | None = None) -> dict:
    """All alignment modes on one scene, sharing the backbone passes."""
    group = backbone.group
    b = scene.annotations[0].box if b is None else b
    pipes = {m: RoIPipeline(backbone, m, spec) for m in modes}
    views = rotated_views(scene.image, b, group)
    fields = [pipes[modes[0]].features(img) for img, _ in views]
    out = {}
    for m, pipe in pipes.items():
        out[m] = invariance_from_features([pipe.align(f, rb) for f, (_, rb) in zip(fields, views)])
    return out


def roi_scenes(count: int, seed: int, side: int = 64):
    return [gen_scene(seed * 10_007 + i, side, 1) for i in range(count)]


def roi_invariance_suite(group_order: int = 4, scenes: int = 20, seed: int = 0,
                         cfg: BackboneConfig | None = None, dtype=np.float64) -> dict:
    """RiRoI features of the equivariant backbone against spatial-only plain features."""
    cfg = cfg or default_backbone_config(group_order)
    if cfg.group_order != group_order:
        cfg = replace(cfg, group_order=group_order)
    equi = ReBackbone(cfg, seed=seed, dtype=dtype).eval()
    plain = ReBackbone(cfg.plain_counterpart(), seed=seed, dtype=dtype).eval()
    group = cfg.group
    data = roi_scenes(scenes, seed)

    def trial(scene):
        b = scene.annotations[0].box
        r = roi_invariance_error(RoIPipeline(equi, "riroi-l2"), scene, b, group)
        c = roi_invariance_error(RoIPipeline(plain, "spatial"), scene, b, group)
        return r, c

    results = parallel_map(trial, data)
    return {
        "group_order": group.order,
        "riroi_max": [r.max_pairwise for r, _ in results],
        "riroi_cv": [r.cv for r, _ in results],
        "control_max": [c.max_pairwise for _, c in results],
        "control_cv": [c.cv for _, c in results],
    }


def alignment_ablation(group_order: int = 8, scenes: int = 20, seed: int = 0,
                       cfg: BackboneConfig | None = None, dtype=np.float64) -> dict:
    """Invariance error of every alignment mode on the same scenes.

    The error is the max pairwise relative L2 across the ``N`` rotated
    copies.  Returns per-mode lists plus the fraction of scenes where
    ``riroi-l2`` is no worse than ``riroi-l1`` and strictly better than
    orientation max pooling.
    """
    cfg = cfg or default_backbone_config(group_order)
    if cfg.group_order != group_order:
        cfg = replace(cfg, group_order=group_order)
    backbone = ReBackbone(cfg, seed=seed, dtype=dtype).eval()
    results = parallel_map(lambda s: mode_invariance(backbone, s), roi_scenes(scenes, seed))
    errors = {m: [r[m].max_pairwise for r in results] for m in MODES}
    l1, l2, mp = (np.array(errors[m]) for m in ("riroi-l1", "riroi-l2", "maxpool"))
    return {
        "group_order": group_order,
        "errors": errors,
        "mean_errors": {m: [r[m].mean_pairwise for r in results] for m in MODES},
        "frac_l2_le_l1": float(np.mean(l2 <= l1)),
        "frac_l2_lt_maxpool": float(np.mean(l2 < mp)),
        "frac_both": float(np.mean((l2 <= l1) & (l2 < mp))),
    }


# -- parameter accounting -----------------------------------------------------------------

@dataclass(frozen=True)
class ParamRatio:
    equivariant: int
    plain: int

    @property
    def ratio(self) -> float:
        return self.equivariant / self.plain


def _layer_budget(layer):
    """Effective ``(in, out)`` channel budget of a layer."""
    if isinstance(layer, LiftConv):
        return layer.in_channels, layer.out_fields * layer.group.order
    if isinstance(layer, GConv):
        n = layer.group.order
        return layer.in_fields * n, layer.out_fields * n
    raise TypeError(f"no channel budget for {type(layer).__name__}")


def param_ratio(equi, plain) -> ParamRatio:
    """Parameter count ratio for matched channel budgets (``K*N == C``)."""
    if isinstance(equi, ReBackbone) and isinstance(plain, ReBackbone):
        if equi.cfg.plain_counterpart() != plain.cfg and equi.cfg != plain.cfg:
            raise ValueError("mismatched channel budgets")
    elif isinstance(equi, (LiftConv, GConv)) and isinstance(plain, (LiftConv, GConv)):
        if _layer_budget(equi) != _layer_budget(plain) or equi.kernel_size != plain.kernel_size:
            raise ValueError("mismatched channel budgets")
    else:
        raise TypeError("param_ratio compares two layers or two backbones")
    return ParamRatio(count_params(equi), count_params(plain))


def layer_param_table(equi: Module, plain: Module) -> list[dict]:
    """Per-layer parameter counts of two structurally identical models."""
    def per_layer(model):
        counts = {}
        for name, p in model.named_parameters():
            layer = name.rsplit(".", 1)[0]
            counts[layer] = counts.get(layer, 0) + p.value.size
        return counts

    a, b = per_layer(equi), per_layer(plain)
    if list(a) != list(b):
        raise ValueError("models do not share a layer structure")
    rows = [{"layer": k, "equivariant": a[k], "plain": b[k], "ratio": a[k] / b[k]} for k in a]
    ta, tb = sum(a.values()), sum(b.values())
    rows.append({"layer": "TOTAL", "equivariant": ta, "plain": tb, "ratio": ta / tb})
    return rows


def param_suite(orders=(4, 8, 16), cfg: BackboneConfig | None = None) -> dict:
    out = {}
    for n in orders:
        base = replace(cfg or BackboneConfig(), group_order=n)
        equi, plain = ReBackbone(base), ReBackbone(base.plain_counterpart())
        out[n] = layer_param_table(equi, plain)
    return out


# -- gradients ------------------------------------------------------------------------------

def _weighted_sum(out: Var, weights: np.ndarray) -> Var:
    return F.sum(F.mul(out, weights))


def gradient_cases(seed: int = 0) -> dict:
    """Scalar-valued closures and their parameters for every differentiable op."""
    rng = np.random.Generator(np.random.Philox(seed))
    g4 = CyclicGroup(4)
    cases = {}

    def case(name, fn, params, out_shape):
        w = rng.standard_normal(out_shape)
        cases[name] = (lambda: _weighted_sum(fn(), w), params)

    x = Param(rng.standard_normal((2, 3, 7, 7)), name="x")
    wt = Param(rng.standard_normal((4, 3, 3, 3)), name="w")
    bias = Param(rng.standard_normal(4), name="b")
    case("conv2d_plain", lambda: F.conv2d(x, wt, bias, 1, 1), [x, wt, bias], (2, 4, 7, 7))

    lift = LiftConv(2, 3, g4, 3, bias=True, rng=rng)
    img = Param(rng.standard_normal((1, 2, 7, 7)), name="img")
    case("lift_forward", lambda: lift(img), [img, *lift.parameters()], (1, 3, 4, 7, 7))

    gconv = GConv(2, 3, g4, 3, bias=True, rng=rng)
    fx = Param(rng.standard_normal((1, 2, 4, 7, 7)), name="field")
    case("gconv_forward", lambda: gconv(fx), [fx, *gconv.parameters()], (1, 3, 4, 7, 7))

    bn = GroupBatchNorm(2)
    bn.gamma.value = rng.uniform(0.5, 1.5, 2)
    bn.beta.value = rng.standard_normal(2)
    fb = Param(rng.standard_normal((2, 2, 4, 5, 5)), name="field")
    case("gbn", lambda: bn(fb), [fb, *bn.parameters()], (2, 2, 4, 5, 5))

    fr = Param(rng.standard_normal((1, 2, 4, 5, 5)), name="field")
    case("grelu", lambda: F.relu(fr), [fr], (1, 2, 4, 5, 5))

    fm = Param(rng.standard_normal((1, 2, 4, 6, 6)), name="field")
    case("gmaxpool", lambda: F.maxpool2d(fm, 2), [fm], (1, 2, 4, 3, 3))

    spec = AlignSpec(3, 2, 2)
    box = RRoI(7.3, 6.8, 7.5, 5.2, 0.7)
    fa = Param(rng.standard_normal((1, 2, 4, 15, 15)), name="field")
    case("rroi_align_spatial", lambda: rroi_align_var(fa, [(0, box)], spec),
         [fa], (1, 2, 4, 3, 3))

    for l in (1, 2, 4):
        fo = Param(rng.standard_normal((2, 2, 4, 3, 3)), name="roi")
        s = AlignSpec(3, 2, l)
        case(f"orientation_align_l{l}",
             lambda fo=fo, s=s: orientation_align_var(fo, [1.1, 4.0], s), [fo], (2, 2, 4, 3, 3))

    fz = Param(rng.standard_normal((1, 2, 4, 15, 15)), name="field")
    case("riroi_align",
         lambda: orientation_align_var(rroi_align_var(fz, [(0, box)], spec), [box.theta], spec),
         [fz], (1, 2, 4, 3, 3))
    return cases


def gradient_suite(seed: int = 0) -> dict:
    """Max relative gradient error per op (float64, central differences)."""
    return {name: grad_check(fn, params, eps=1e-5, samples=64, seed=seed)
            for name, (fn, params) in gradient_cases(seed).items()}


# -- training comparison -----------------------------------------------------------------------

def augmentation_comparison(cfg=None, seeds=(0, 1, 2), variants=("plain", "rotaug", "equi"),
                            log=None) -> dict:
    """Train each variant per seed on upright data, test on rotated data."""
    from .train import TrainConfig, make_split, rotated_copies, train_toy, with_variant

    cfg = cfg or TrainConfig()
    if not seeds:
        raise ValueError("at least one seed is required")
    runs = {v: [] for v in variants}
    for seed in seeds:
        base = replace(cfg, seed=seed)
        test = make_split(base, "test")
        data = (make_split(base, "train"), test,
                rotated_copies(test, CyclicGroup(base.group_order), seed + 104729))
        for v in variants:
            result = train_toy(with_variant(base, v), data=data)
            runs[v].append({"seed": seed, "final": result.final, "curve": result.curve,
                            "wall_seconds": result.wall_seconds})
            if log:
                log(v, seed, result)
    summary = {
        v: {
            "rotated_acc_mean": float(np.mean([r["final"]["test_rotated_acc"] for r in rs])),
            "upright_acc_mean": float(np.mean([r["final"]["test_upright_acc"] for r in rs])),
            "wall_seconds": float(sum(r["wall_seconds"] for r in rs)),
        }
        for v, rs in runs.items()
    }
    return {"config": cfg.to_dict(), "seeds": list(seeds), "summary": summary, "runs": runs}


# -- reports ----------------------------------------------------------------------------------------

def config_hash(config) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def make_report(kind: str, group_order: int, seed: int, trials: int, metrics: dict,
                tolerances: dict, passed: bool, config: dict | None = None) -> dict:
    config = config or {}
    return _jsonable({
        "format": REPORT_FORMAT,
        "kind": kind,
        "group_order": group_order,
        "seed": seed,
        "trials": trials,
        "metrics": metrics,
        "tolerances": tolerances,
        "pass": bool(passed),
        "config": config,
        "config_hash": config_hash(config),
        "version": __version__,
    })


def write_report(path, report: dict) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True))


def write_csv(path, rows) -> None:
    rows = list(rows)
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
