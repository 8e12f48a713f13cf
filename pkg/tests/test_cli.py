import csv
import io
import json

import numpy as np
import pytest

from convmg import cli


@pytest.fixture
def config(tmp_path):
    def make(**sections):
        cfg = {"seed": 3, "field": {"kind": "UniformSmooth"}, "grid": {"coarse_cells": 5, "L": 3}}
        cfg.update(sections)
        path = tmp_path / "run.json"
        path.write_text(json.dumps(cfg))
        return str(path)

    return make


def run(argv, capsys):
    code = cli.main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


class TestConfig:
    def test_missing_config_flag(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main(["generate"])
        assert exc.value.code == 2
        assert "usage" in capsys.readouterr().err

    def test_missing_file(self, capsys, tmp_path):
        code, _, err = run(["solve", "--config", str(tmp_path / "none.json")], capsys)
        assert code == 2 and "not found" in err

    @pytest.mark.parametrize("bad", [
        {"field": {"kind": "UniformSmooth"}},
        {"field": {"kind": "UniformSmooth"}, "grid": {"L": 0}},
        {"field": {"kind": "CookieFixed", "p": 15}, "grid": {}},
        {"field": {"kind": "UniformSmooth"}, "grid": {}, "extra": 1},
    ])
    def test_invalid(self, bad, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(bad))
        code, _, err = run(["solve", "--config", str(path)], capsys)
        assert code == 2 and "error" in err

    def test_defaults_filled(self, config):
        cfg = cli.load_config(config())
        assert cfg["solver"]["k_pre"] == 3 and cfg["dataset"]["N1"] == 16


class TestVerify:
    def test_passes(self, config, capsys):
        code, out, _ = run(["verify", "--config", config()], capsys)
        assert code == 0
        assert out.count("PASS") == 10

    def test_json(self, config, capsys):
        code, out, _ = run(["verify", "--config", config(), "--json"], capsys)
        doc = json.loads(out)
        assert code == 0 and doc["passed"]
        assert {c["check"] for c in doc["checks"]} >= {"conv_operator_equivalence", "galerkin", "adjointness"}

    def test_fault_injection(self, config, capsys):
        code, _, err = run(["verify", "--config", config(), "--inject-fault"], capsys)
        assert code == 1 and "operator_equivalence" in err


class TestGenerate:
    def test_tiny_run_and_dataset_verify(self, config, tmp_path, capsys):
        out_dir = tmp_path / "ds"
        code, out, _ = run(["generate", "--config", config(dataset={"N1": 4}), "--out", str(out_dir)], capsys)
        assert code == 0 and "[4, 2, 1]" in out
        code, out, _ = run(["verify", "--dataset", str(out_dir)], capsys)
        assert code == 0 and "dataset_telescoping" in out
        code, out, _ = run(["inspect", str(out_dir), "--json"], capsys)
        assert json.loads(out)["counts"] == [4, 2, 1]

    def test_workers_identical(self, config, tmp_path, capsys):
        path = config(dataset={"N1": 4})
        run(["generate", "--config", path, "--out", str(tmp_path / "a"), "--workers", "1"], capsys)
        run(["generate", "--config", path, "--out", str(tmp_path / "b"), "--workers", "4"], capsys)
        a = json.loads((tmp_path / "a" / "manifest.json").read_text())["arrays"]
        b = json.loads((tmp_path / "b" / "manifest.json").read_text())["arrays"]
        assert {k: v["sha256"] for k, v in a.items()} == {k: v["sha256"] for k, v in b.items()}

    def test_needs_output(self, config, capsys):
        code, _, _ = run(["generate", "--config", config()], capsys)
        assert code == 2

    def test_existing_target_fails(self, config, tmp_path, capsys):
        (tmp_path / "full").mkdir()
        (tmp_path / "full" / "x").write_text("x")
        code, _, _ = run(["generate", "--config", config(dataset={"N1": 2}), "--out", str(tmp_path / "full")], capsys)
        assert code == 1


class TestReports:
    def test_contraction_csv(self, config, capsys):
        path = config(contraction={"levels": [3], "k_values": [1, 3], "draws": 2, "cycles": 3})
        code, out, _ = run(["contraction", "--config", path], capsys)
        rows = list(csv.DictReader(io.StringIO(out)))
        assert code == 0
        assert [(r["level"], r["k"], r["cycle"]) for r in rows] == [("3", k, c) for k in "13" for c in "123"]

    def test_weights_csv(self, config, capsys):
        path = config(weights={"L_values": [3, 4, 5, 6], "k": 2, "k0": 1, "m": 3})
        code, out, _ = run(["weights", "--config", path], capsys)
        rows = list(csv.DictReader(io.StringIO(out)))
        assert code == 0
        assert list(rows[0]) == ["L", "k", "k0", "m", "epsilon", "weights", "d2_L"]
        assert [r["d2_L"] for r in rows[2:]] == ["0", "0"]

    def test_metrics_self_zero(self, config, capsys):
        path = config(metrics={"N": 2, "ref_offset": 1})
        code, out, _ = run(["metrics", "--config", path, "--json"], capsys)
        vals = {r["kind"]: r["value"] for r in json.loads(out)}
        assert code == 0 and vals["MRH1"] == 0 and vals["MRL2"] == 0 and vals["MRH1_ref"] > 0

    def test_metrics_zero_predictions(self, config, capsys):
        path = config(metrics={"N": 2, "ref_offset": 1, "predictions": "zero"})
        code, out, _ = run(["metrics", "--config", path], capsys)
        rows = {r["kind"]: float(r["value"]) for r in csv.DictReader(io.StringIO(out))}
        assert rows["MRH1"] == pytest.approx(1.0) and rows["MRL2_ref"] == pytest.approx(1.0)

    def test_solve(self, config, tmp_path, capsys):
        out_file = tmp_path / "u.npy"
        code, out, _ = run(["solve", "--config", config(), "--out", str(out_file)], capsys)
        assert code == 0 and "relative residual" in out
        assert np.load(out_file).shape == (361,)

    def test_idempotent(self, config, capsys):
        path = config(weights={"L_values": [1, 2, 3]})
        first = run(["weights", "--config", path], capsys)[1]
        assert run(["weights", "--config", path], capsys)[1] == first
