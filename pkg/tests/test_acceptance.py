"""Acceptance criteria 1 to 8, each at its pinned tolerance and runtime budget.

Every test prints a ``criterion N: PASS|FAIL`` line, and the lines are
repeated in the pytest terminal summary.  Run the file directly with
``python3 tests/test_acceptance.py`` to get only the lines.
"""

import subprocess
import sys
import time
from pathlib import Path

import pytest

from conftest import record
from regconv import verify as V
from regconv.layers import BackboneConfig, GConv, ReBackbone
from regconv.group import CyclicGroup
from regconv.train import TrainConfig

HERE = Path(__file__).parent
pytestmark = pytest.mark.acceptance


def timed(fn):
    start = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - start


class TestAcceptance:
    def test_1_equivariance_n4(self):
        rep, secs = timed(lambda: V.equivariance_suite(4, trials=20, seed=0))
        ok = rep.max_error <= 1e-4 and rep.min_control >= 0.1 and secs <= 60
        record(1, ok, f"max error {rep.max_error:.2e} (<= 1e-4), control min {rep.min_control:.3f} "
                      f"(>= 0.1), {secs:.0f} s (<= 60 s)")
        assert ok

    def test_2_equivariance_n8(self):
        rep, secs = timed(lambda: V.equivariance_suite(8, trials=20, seed=0))
        ok = rep.max_error <= 7e-2 and rep.beats_control_every_trial() and secs <= 120
        record(2, ok, f"max error {rep.max_error:.3e} (<= 7e-2), below control on every trial: "
                      f"{rep.beats_control_every_trial()}, {secs:.0f} s (<= 120 s)")
        assert ok

    def test_3_riroi_invariance_n4(self):
        res, secs = timed(lambda: V.roi_invariance_suite(4, scenes=20, seed=0))
        worst, ctrl = max(res["riroi_max"]), min(res["control_max"])
        ok = worst <= 1e-3 and ctrl >= 0.1 and secs <= 120
        record(3, ok, f"max pairwise {worst:.2e} (<= 1e-3), spatial-only plain min {ctrl:.3f} "
                      f"(>= 0.1), {secs:.0f} s (<= 120 s)")
        assert ok

    def test_4_alignment_ablation(self):
        res, secs = timed(lambda: V.alignment_ablation(8, scenes=20, seed=0))
        frac = res["frac_both"]
        ok = frac >= 0.8 and secs <= 180
        record(4, ok, f"riroi-l2 <= riroi-l1 and < maxpool on {frac:.0%} of 20 scenes at N=8 "
                      f"(>= 80%), {secs:.0f} s (<= 180 s)")
        assert ok

    def test_5_parameter_ratio(self):
        def run():
            out = {}
            for n in (4, 8, 16):
                k = 8
                layer = V.param_ratio(GConv(k, k, CyclicGroup(n), 3), GConv(k * n, k * n, CyclicGroup(1), 3))
                cfg = BackboneConfig(group_order=n)
                full = V.param_ratio(ReBackbone(cfg), ReBackbone(cfg.plain_counterpart()))
                out[n] = (layer.ratio, full.ratio)
            return out

        ratios, secs = timed(run)
        ok = all(lr == 1 / n and 1 / n <= fr <= 1.3 / n for n, (lr, fr) in ratios.items()) and secs <= 1
        text = ", ".join(f"N={n}: layer {lr:.6f} backbone {fr:.6f}" for n, (lr, fr) in ratios.items())
        record(5, ok, f"{text}, {secs:.2f} s (<= 1 s)")
        assert ok

    def test_6_gradients(self):
        errs, secs = timed(lambda: V.gradient_suite(0))
        worst = max(errs, key=errs.get)
        ok = errs[worst] <= 1e-4 and secs <= 300
        record(6, ok, f"{len(errs)} ops, worst {worst} {errs[worst]:.2e} (<= 1e-4), {secs:.0f} s (<= 300 s)")
        assert ok

    def test_7_generalization(self):
        cfg = TrainConfig(steps=2000, train_size=2000)
        res, secs = timed(lambda: V.augmentation_comparison(cfg, seeds=(0, 1, 2), variants=("plain", "equi")))
        equi = res["summary"]["equi"]["rotated_acc_mean"]
        plain = res["summary"]["plain"]["rotated_acc_mean"]
        gap = equi - plain
        ok = gap >= 0.10 and secs <= 1200
        record(7, ok, f"rotated accuracy equi {equi:.3f} vs plain {plain:.3f}, gap {100 * gap:.1f} points "
                      f"(>= 10), {secs:.0f} s (<= 1200 s)")
        assert ok

    def test_8_exact_unit_cases(self):
        files = ["test_tensor.py", "test_group.py", "test_roi.py", "test_layers.py", "test_autodiff.py",
                 "test_synth.py", "test_verify.py", "test_train.py"]
        cmd = [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *(str(HERE / f) for f in files)]
        proc, secs = timed(lambda: subprocess.run(cmd, capture_output=True, text=True, cwd=HERE.parent))
        summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
        ok = proc.returncode == 0 and secs <= 10
        record(8, ok, f"unit examples: {summary}, {secs:.1f} s (<= 10 s)")
        assert ok, proc.stdout[-2000:]


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
