"""Command-line entry point: ``python3 -m regconv <command> ...``.

Exit codes: 0 when every metric passes, 1 when a metric fails (the failing
metric is named on stderr), 2 for usage or configuration errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .group import CyclicGroup
from .layers import GConv, ReBackbone
from .roi import orientation_align, orientation_maxpool, rroi_align_spatial, save_aligned_feature
from .synth import export_png, gen_scene, save_dataset
from . import verify as V

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
SUITES = ("equivariance", "roi-invariance", "gradients", "all")


class ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def group_order(text: str) -> int:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError("group order must be a positive integer") from None
    if not value.is_integer() or value < 1:
        raise argparse.ArgumentTypeError("group order must be a positive integer")
    return int(value)


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError("must be a non-negative integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="regconv", description="Equivariance checks, parameter audits and toy training.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, group_default=4):
        p.add_argument("--group", type=group_order, default=group_default, metavar="N")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", type=Path, default=None, metavar="PATH")
        p.add_argument("--precision", choices=("f32", "f64"), default=None,
                       help="f64 for verification, f32 for training by default")

    p = sub.add_parser("verify", help="run equivariance, RoI invariance and gradient suites")
    common(p)
    p.add_argument("--suite", choices=SUITES, default="all")
    p.add_argument("--tol", type=float, default=None, help="override the suite tolerance")
    p.add_argument("--trials", type=_positive_int, default=20)

    p = sub.add_parser("bench-params", help="parameter counts of equivariant vs plain backbones")
    p.add_argument("--group", type=group_order, action="append", metavar="N",
                   help="group order (repeatable); default 4, 8 and 16")
    p.add_argument("--out", type=Path, default=None, metavar="PATH")

    p = sub.add_parser("train-toy", help="train the toy shape classifier")
    common(p)
    p.add_argument("--variant", default="equi", help="plain, rotaug or equi")
    p.add_argument("--steps", type=_positive_int, default=2000)
    p.add_argument("--resume", type=Path, default=None, metavar="CKPT")
    p.add_argument("--train-size", type=_positive_int, default=2000)
    p.add_argument("--test-size", type=_positive_int, default=200)

    p = sub.add_parser("eval-invariance", help="compare RoI alignment modes on rotated scenes")
    common(p)
    p.add_argument("--scenes", type=_positive_int, default=20)
    p.add_argument("--dump-features", action="store_true")

    p = sub.add_parser("gen-data", help="write a synthetic dataset (and optional PNGs)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=_positive_int, default=16)
    p.add_argument("--side", type=int, default=64)
    p.add_argument("--objects", type=_positive_int, default=1)
    p.add_argument("--out", type=Path, required=True, metavar="PATH")
    p.add_argument("--png", type=Path, default=None, metavar="DIR")
    return parser


def _dtype(args):
    return np.float32 if args.precision == "f32" else np.float64


def _precision(args, default: str) -> str:
    return args.precision or default


def _emit(report, out: Path | None, default_name: str):
    path = out if out is not None else Path(default_name)
    if path.suffix != ".json":
        path.mkdir(parents=True, exist_ok=True)
        path = path / default_name
    V.write_report(path, report)
    print(f"report written to {path}")
    return path


def _fail(metric: str, value, tol) -> None:
    print(f"FAIL {metric}: {value} (tolerance {tol})", file=sys.stderr)


def cmd_verify(args) -> int:
    group = CyclicGroup(args.group)
    dtype = _dtype(args)
    suites = ("equivariance", "roi-invariance", "gradients") if args.suite == "all" else (args.suite,)
    metrics, tolerances, failures = {}, {}, []

    if "equivariance" in suites:
        rep = V.equivariance_suite(group.order, args.trials, args.seed, dtype=dtype)
        tol = args.tol if args.tol is not None else V.TOLERANCES["equivariance"].get(group.order, 7e-2)
        metrics["equivariance"] = {"max_error": rep.max_error, "errors_max": rep.errors_max,
                                   "errors_mean": rep.errors_mean, "control_max": rep.control_max,
                                   "control_min_trial": rep.min_control, "mask": rep.mask}
        tolerances["equivariance"] = tol
        if not rep.max_error <= tol:
            failures.append(("equivariance.max_error", rep.max_error, tol))

    if "roi-invariance" in suites:
        res = V.roi_invariance_suite(group.order, args.trials, args.seed, dtype=dtype)
        tol = args.tol if args.tol is not None else V.TOLERANCES["roi_invariance"].get(group.order, 8e-2)
        worst = max(res["riroi_max"]) if res["riroi_max"] else 0.0
        metrics["roi_invariance"] = {"max_pairwise": worst, "cv_max": max(res["riroi_cv"], default=0.0),
                                     "control_min": min(res["control_max"], default=0.0),
                                     "control_cv_min": min(res["control_cv"], default=0.0)}
        tolerances["roi_invariance"] = tol
        if not worst <= tol:
            failures.append(("roi_invariance.max_pairwise", worst, tol))

    if "gradients" in suites:
        grads = V.gradient_suite(args.seed)
        tol = V.TOLERANCES["gradient"]
        metrics["gradients"] = grads
        tolerances["gradients"] = tol
        for op, err in grads.items():
            if not err <= tol:
                failures.append((f"gradients.{op}", err, tol))

    config = {"command": "verify", "suite": args.suite, "group": group.order, "trials": args.trials,
              "precision": _precision(args, "f64"), "backbone": V.default_backbone_config(group.order).to_dict()}
    report = V.make_report("verify", group.order, args.seed, args.trials, metrics, tolerances,
                           not failures, config)
    _emit(report, args.out, "verify_report.json")
    for name, value, tol in failures:
        _fail(name, value, tol)
    print("PASS" if not failures else "FAIL")
    return EXIT_OK if not failures else EXIT_FAIL


def cmd_bench_params(args) -> int:
    orders = args.group or [4, 8, 16]
    rows, singles = [], {}
    for n in orders:
        for row in V.param_suite((n,))[n]:
            rows.append({"group_order": n, **row})
        singles[n] = V.param_ratio(GConv(8, 8, CyclicGroup(n), 3), GConv(8 * n, 8 * n, CyclicGroup(1), 3))
    out = args.out or Path("bench_params.csv")
    if out.suffix != ".csv":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "bench_params.csv"
    V.write_csv(out, rows)
    for r in rows:
        print(f"N={r['group_order']:<3} {r['layer']:<32} {r['equivariant']:>9} {r['plain']:>9} {r['ratio']:.6f}")
    for n, single in singles.items():
        print(f"N={n:<3} single 3x3 layer, K=8 vs C={8 * n}: {single.equivariant}/{single.plain} = {single.ratio:.6f}")
    print(f"csv written to {out}")
    return EXIT_OK


def cmd_train_toy(args) -> int:
    from .train import TrainConfig, TrainingDiverged, train_toy

    try:
        cfg = TrainConfig(variant=args.variant, group_order=args.group, steps=args.steps, seed=args.seed,
                          train_size=args.train_size, test_size=args.test_size,
                          precision=_precision(args, "f32"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = args.out or Path(f"train_{cfg.variant}_seed{cfg.seed}")
    log = lambda row: print(json.dumps(row), flush=True)  # noqa: E731
    try:
        result = train_toy(cfg, out_dir=out, resume=args.resume, log=log)
    except TrainingDiverged as exc:
        print(f"FAIL training: {exc}", file=sys.stderr)
        return EXIT_FAIL
    report = V.make_report("train-toy", cfg.group_order, cfg.seed, 1, {"final": result.final,
                           "wall_seconds": result.wall_seconds}, {}, True, cfg.to_dict())
    V.write_report(Path(out) / "report.json", report)
    print(f"checkpoint and metrics written to {out}")
    return EXIT_OK


def cmd_eval_invariance(args) -> int:
    group = CyclicGroup(args.group)
    cfg = V.default_backbone_config(group.order)
    backbone = ReBackbone(cfg, seed=args.seed, dtype=_dtype(args)).eval()
    scenes = V.roi_scenes(args.scenes, args.seed)
    out = args.out or Path("eval_invariance")
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, scene in enumerate(scenes):
        res = V.mode_invariance(backbone, scene)
        rows.append({"scene": i, **{m: r.max_pairwise for m, r in res.items()}})
        if args.dump_features:
            _dump_scene(backbone, scene, group, out / f"scene{i:03d}")
    V.write_csv(out / "invariance.csv", rows)
    metrics = {m: {"mean": float(np.mean([r[m] for r in rows])), "max": float(np.max([r[m] for r in rows]))}
               for m in V.MODES}
    better = float(np.mean([r["riroi-l2"] < r["spatial"] for r in rows]))
    metrics["frac_riroi_l2_below_spatial"] = better
    report = V.make_report("eval-invariance", group.order, args.seed, len(rows), metrics,
                           {"frac_riroi_l2_below_spatial": 1.0}, better == 1.0,
                           {"command": "eval-invariance", "backbone": cfg.to_dict(), "scenes": args.scenes})
    V.write_report(out / "report.json", report)
    for m in V.MODES:
        print(f"{m:<10} mean {metrics[m]['mean']:.3e}  max {metrics[m]['max']:.3e}")
    if better < 1.0:
        _fail("frac_riroi_l2_below_spatial", better, 1.0)
        return EXIT_FAIL
    return EXIT_OK


def _dump_scene(backbone, scene, group, prefix: Path):
    box = scene.annotations[0].box
    views = V.rotated_views(scene.image, box, group)
    for k, (img, b) in enumerate(views):
        field_ = V.RoIPipeline(backbone).features(img)
        spatial = rroi_align_spatial(field_, b)
        save_aligned_feature(f"{prefix}_k{k}_spatial", spatial)
        save_aligned_feature(f"{prefix}_k{k}_maxpool", orientation_maxpool(spatial))
        save_aligned_feature(f"{prefix}_k{k}_riroi", orientation_align(spatial, b.theta))


def cmd_gen_data(args) -> int:
    try:
        scenes = [gen_scene(args.seed * 100_003 + i, args.side, args.objects) for i in range(args.count)]
    except (ValueError, RuntimeError) as exc:
        raise ConfigError(str(exc)) from exc
    save_dataset(args.out, scenes)
    print(f"{len(scenes)} scenes written to {args.out}")
    if args.png is not None:
        args.png.mkdir(parents=True, exist_ok=True)
        for i, s in enumerate(scenes):
            export_png(s, args.png / f"scene{i:04d}.png")
        print(f"PNG previews written to {args.png}")
    return EXIT_OK


COMMANDS = {
    "verify": cmd_verify,
    "bench-params": cmd_bench_params,
    "train-toy": cmd_train_toy,
    "eval-invariance": cmd_eval_invariance,
    "gen-data": cmd_gen_data,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:  # --help
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
