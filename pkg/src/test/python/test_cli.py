import json

import pandas as pd
import pytest

from src.main.python.core.main import build_parser, main, run_command


def write_config(tmp_path, problem_dir, name="two_dm_example.json", edit=None):
    document = json.loads((problem_dir / name).read_text())
    if edit is not None:
        edit(document)
    path = tmp_path / f"edited_{name}"
    path.write_text(json.dumps(document))
    return path


def run(*argv):
    return run_command([str(a) for a in argv])


class TestSolve:
    def test_decentralized_outputs(self, tmp_path, problem_dir):
        out = tmp_path / "solve"
        code, doc = run("solve", "--config", problem_dir / "two_dm_example.json", "--out", out)
        assert code == 0
        assert doc["files"] == ["diagnostics.json", "mean_field.csv", "riccati_dm1.csv", "riccati_dm2.csv"]
        K1 = pd.read_csv(out / "riccati_dm1.csv")
        assert list(K1.columns) == ["t", "K_1_1", "K_1_2", "K_2_1", "K_2_2"]
        assert len(K1) == 401
        mean_field = pd.read_csv(out / "mean_field.csv")
        assert {"x_bar_1", "r1_2", "u_bar2_1"} <= set(mean_field.columns)
        diagnostics = json.loads((out / "diagnostics.json").read_text())
        assert diagnostics["mean_field"]["converged"]
        assert diagnostics["certificate"]["block_system"] <= 1e-10

    def test_centralized_normal_form(self, tmp_path, problem_dir):
        out = tmp_path / "nf"
        code, doc = run("solve", "--config", problem_dir / "scalar_nf.json", "--out", out)
        assert code == 0 and doc["mode"] == "centralized"
        table = pd.read_csv(out / "riccati.csv")
        assert list(table.columns) == ["t", "K_1_1", "gain_1_1", "r_1", "feed_forward_1"]
        assert json.loads((out / "diagnostics.json").read_text())["nf"] is True

    def test_mode_flag_overrides_file(self, tmp_path, problem_dir):
        code, doc = run("solve", "--config", problem_dir / "two_dm_example.json", "--out", tmp_path / "c",
                        "--mode", "centralized")
        assert code == 0
        assert doc["files"] == ["diagnostics.json", "riccati.csv"]

    def test_singular_weight_is_a_config_error(self, tmp_path, problem_dir, capsys):
        def singular(document):
            document["matrices"]["R"] = [[1.0, 0.0], [0.0, 0.0]]

        config = write_config(tmp_path, problem_dir, edit=singular)
        code, doc = run("solve", "--config", config, "--out", tmp_path / "out")
        assert code == 2
        assert doc["kind"] == "not_positive_definite"
        assert doc["node"] == 0
        assert json.loads(capsys.readouterr().out) == doc

    def test_missing_config(self, tmp_path):
        code, doc = run("solve", "--config", tmp_path / "missing.json", "--out", tmp_path / "out")
        assert code == 2
        assert doc["kind"] == "invalid_config"

    def test_refuses_non_empty_output(self, tmp_path, problem_dir):
        out = tmp_path / "busy"
        out.mkdir()
        (out / "keep.txt").write_text("x")
        code, doc = run("solve", "--config", problem_dir / "two_dm_example.json", "--out", out)
        assert code == 2 and doc["kind"] == "usage"
        code, _ = run("solve", "--config", problem_dir / "two_dm_example.json", "--out", out, "--force")
        assert code == 0


class TestSimulate:
    def test_fixed_seed_is_byte_identical(self, tmp_path, problem_dir):
        config = problem_dir / "two_dm_example.json"
        for name in ("a", "b"):
            code, _ = run("simulate", "--config", config, "--out", tmp_path / name, "--seed", 7, "--n-paths", 20)
            assert code == 0
        for filename in ("ensemble.csv", "cost_report.json"):
            assert (tmp_path / "a" / filename).read_bytes() == (tmp_path / "b" / filename).read_bytes()
        assert json.loads((tmp_path / "a" / "cost_report.json").read_text())["scheme"] == "euler"

    def test_cost_report_contents(self, tmp_path, problem_dir):
        out = tmp_path / "sim"
        code, doc = run("simulate", "--config", problem_dir / "two_dm_example.json", "--out", out,
                        "--n-paths", 50, "--scheme", "rk4")
        assert code == 0
        report = json.loads((out / "cost_report.json").read_text())
        assert report["n_paths"] == 50 and report["scheme"] == "rk4"
        assert report["j_se"] > 0.0
        assert list(report) == sorted(report)
        assert doc["j_exact"] == report["j_exact"]

    def test_single_noiseless_path(self, tmp_path, problem_dir):
        def quiet(document):
            document["matrices"]["G"] = [[0.0, 0.0], [0.0, 0.0]]
            document["x0"]["cov"] = [[0.0, 0.0], [0.0, 0.0]]

        config = write_config(tmp_path, problem_dir, edit=quiet)
        code, doc = run("simulate", "--config", config, "--out", tmp_path / "out", "--n-paths", 1, "--scheme", "rk4")
        assert code == 0
        assert doc["j_se"] == 0.0
        assert abs(doc["j_mc"] - doc["j_exact"]) <= 1e-8


class TestVerify:
    def test_bundled_example_passes(self, tmp_path, problem_dir):
        out = tmp_path / "verify"
        code, doc = run("verify", "--config", problem_dir / "two_dm_example.json", "--out", out)
        assert code == 0, doc
        report = json.loads((out / "verification.json").read_text())
        assert report["passed"]
        assert report["stationarity"]["max_residual"] <= 1e-9
        assert report["regression"]["method"] == "regression"
        assert report["comparison"]["ordered"]

    def test_detuned_example_fails_with_report(self, tmp_path, problem_dir):
        out = tmp_path / "detuned"
        code, doc = run("verify", "--config", problem_dir / "detuned.json", "--out", out)
        assert code == 1
        assert doc["status"] == "failed"
        report = json.loads((out / "verification.json").read_text())
        assert not report["stationarity"]["passed"]
        assert report["stationarity"]["max_residual"] >= 1e-3

    def test_decoupled_example_has_no_gap(self, tmp_path, problem_dir):
        code, doc = run("verify", "--config", problem_dir / "decoupled.json", "--out", tmp_path / "dec")
        assert code == 0, doc
        assert abs(doc["cost_gap"]) <= 1e-8


class TestCompare:
    def test_coupling_sweep(self, tmp_path, problem_dir):
        out = tmp_path / "cmp"
        code, doc = run("compare", "--config", problem_dir / "coupling_sweep.json", "--out", out)
        assert code == 0 and doc["rows"] == 4
        table = pd.read_csv(out / "comparison.csv")
        assert list(table.columns) == ["rho", "j_centralized", "j_decentralized", "gap", "gap_relative"]
        assert abs(table.loc[table["rho"] == 0.0, "gap"].iloc[0]) <= 1e-8
        assert (table["gap"] >= -1e-8).all()
        assert table.sort_values("rho")["gap"].diff().dropna().ge(-1e-10).all()

    def test_empty_sweep_is_a_usage_error(self, tmp_path, problem_dir):
        out = tmp_path / "empty"
        code, doc = run("compare", "--config", problem_dir / "two_dm_example.json", "--out", out)
        assert code == 2
        assert doc["kind"] == "usage"
        assert json.loads((out / "error.json").read_text()) == doc


def test_parser_rejects_unknown_command():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["optimize", "--config", "x.json"])


def test_main_returns_exit_code(tmp_path, problem_dir):
    assert main(["solve", "--config", str(problem_dir / "decoupled.json"), "--out", str(tmp_path / "m")]) == 0
