"""Command-line surface and exit codes."""

import csv
import json

import pytest

from regconv.cli import main
from regconv.synth import load_dataset


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


class TestUsage:
    @pytest.mark.parametrize("bad", ["3.5", "0", "-2", "four"])
    def test_bad_group(self, capsys, bad):
        code, _, err = run(capsys, "verify", "--group", bad)
        assert code == 2 and "group order must be a positive integer" in err

    def test_unknown_command(self, capsys):
        assert run(capsys, "frobnicate")[0] == 2

    def test_unknown_variant(self, capsys, tmp_path):
        code, _, err = run(capsys, "train-toy", "--variant", "dropout", "--out", str(tmp_path))
        assert code == 2 and "variant" in err


class TestVerify:
    def test_equivariance_n4(self, capsys, tmp_path):
        out = tmp_path / "rep.json"
        code, stdout, _ = run(capsys, "verify", "--group", "4", "--suite", "equivariance",
                              "--trials", "2", "--out", str(out))
        assert code == 0 and "PASS" in stdout
        rep = json.loads(out.read_text())
        assert rep["pass"] and rep["format"] == "regconv-report-v1" and rep["seed"] == 0
        assert rep["metrics"]["equivariance"]["max_error"] <= 1e-4

    def test_roi_invariance_n8(self, capsys, tmp_path):
        code, _, _ = run(capsys, "verify", "--group", "8", "--suite", "roi-invariance", "--tol", "0.08",
                         "--trials", "3", "--out", str(tmp_path))
        assert code == 0
        assert (tmp_path / "verify_report.json").exists()

    def test_failure_names_metric(self, capsys, tmp_path):
        code, _, err = run(capsys, "verify", "--group", "8", "--suite", "equivariance", "--tol", "1e-9",
                           "--trials", "1", "--out", str(tmp_path / "r.json"))
        assert code == 1 and "equivariance.max_error" in err


class TestBenchParams:
    def test_csv_rows(self, capsys, tmp_path):
        out = tmp_path / "p.csv"
        code, stdout, _ = run(capsys, "bench-params", "--group", "8", "--group", "1", "--out", str(out))
        assert code == 0
        assert "0.125000" in stdout
        rows = list(csv.DictReader(out.open()))
        for n in ("8", "1"):
            mine = [r for r in rows if r["group_order"] == n]
            assert mine[-1]["layer"] == "TOTAL" and len(mine) > 2
        assert all(float(r["ratio"]) == 1.0 for r in rows if r["group_order"] == "1")


class TestTrainToy:
    def test_zero_steps_chance(self, capsys, tmp_path):
        code, _, _ = run(capsys, "train-toy", "--variant", "equivariant", "--steps", "0",
                         "--train-size", "8", "--test-size", "8", "--out", str(tmp_path))
        assert code == 0
        result = json.loads((tmp_path / "result.json").read_text())
        assert result["final"]["test_rotated_acc"] == 0.25
        assert json.loads((tmp_path / "checkpoint" / "manifest.json").read_text())["format"] == "regconv-ckpt-v1"


class TestEvalInvariance:
    def test_dump_and_modes(self, capsys, tmp_path):
        code, stdout, _ = run(capsys, "eval-invariance", "--group", "4", "--scenes", "2",
                              "--dump-features", "--out", str(tmp_path))
        assert code == 0 and "riroi-l2" in stdout
        meta = json.loads((tmp_path / "scene000_k1_maxpool.json").read_text())
        assert meta["N"] == 1 and meta["tag"] == "orientation-pooled"
        assert (tmp_path / "scene001_k3_riroi.rgt").exists()
        rows = list(csv.DictReader((tmp_path / "invariance.csv").open()))
        assert all(float(r["riroi-l2"]) < float(r["spatial"]) for r in rows)


class TestGenData:
    def test_dataset_and_png(self, capsys, tmp_path):
        code, _, _ = run(capsys, "gen-data", "--count", "3", "--out", str(tmp_path / "d.ds"),
                         "--png", str(tmp_path / "png"))
        assert code == 0
        assert len(load_dataset(tmp_path / "d.ds")) == 3
        assert len(list((tmp_path / "png").glob("*.png"))) == 3

    def test_bad_side(self, capsys, tmp_path):
        assert run(capsys, "gen-data", "--side", "16", "--out", str(tmp_path / "d.ds"))[0] == 2
