import csv
import json

import pytest

from ablo.cli import EXIT_CONFIG, EXIT_FAILED, EXIT_OK, main
from ablo.config import config_from_dict
from ablo.constants import CSV_SCHEMA_VERSION
from ablo.errors import VerificationError
from ablo.outer_loop import RUN_COLUMNS
from ablo.scenarios import run_scenario
from ablo.verification import VerificationReport


def _read_csv(path):
    with path.open(encoding="utf-8", newline="") as fh:
        return list(csv.reader(fh))


def _run(scenario, tmp_path, raw=None, **overrides):
    config = config_from_dict(raw or {}, scenario, {"out": str(tmp_path / scenario), **overrides})
    return run_scenario(config)


@pytest.mark.parametrize("engine", ["batch", "sequential"])
def test_divergence_writes_one_file_per_replica(tmp_path, engine):
    result = _run("divergence", tmp_path, {"options": {"engine": engine}}, replicas=2, iterations=30)
    curves = [f for f in result.files if f.endswith(".csv")]
    assert sorted(curves) == sorted(f"{label}_replica{i}.csv" for label in ("fom", "ufom_q0.1") for i in range(2))
    rows = _read_csv(result.out_dir / "fom_replica0.csv")
    assert rows[0] == list(RUN_COLUMNS)
    assert len(rows) == 31
    assert [int(row[1]) for row in rows[1:]] == list(range(1, 31))
    manifest = json.loads((result.out_dir / "manifest.json").read_text())
    assert manifest["csv_schema_version"] == CSV_SCHEMA_VERSION
    assert manifest["files"] == result.files
    assert result.summary["limit_grad_sq"] == pytest.approx(0.12, abs=1e-9)


def test_zero_iterations_give_header_only_curves(tmp_path):
    result = _run("divergence", tmp_path, replicas=1, iterations=0)
    assert _read_csv(result.out_dir / "fom_replica0.csv") == [list(RUN_COLUMNS)]


def test_identical_configs_give_identical_files(tmp_path):
    a = _run("divergence", tmp_path / "a", replicas=2, iterations=25, seed=5)
    b = _run("divergence", tmp_path / "b", replicas=2, iterations=25, seed=5)
    for name in a.files:
        if name != "manifest.json":
            assert (a.out_dir / name).read_bytes() == (b.out_dir / name).read_bytes(), name


def test_convergence_tracks_min_so_far(tmp_path):
    result = _run("convergence", tmp_path, replicas=2, iterations=40)
    for stats in result.summary["estimators"].values():
        assert stats["min_nonincreasing"]


def test_bias_variance_sweep(tmp_path):
    raw = {"options": {"alpha_points": 3, "grid_points": 201}}
    result = _run("bias_variance_sweep", tmp_path, raw)
    rows = _read_csv(result.out_dir / "sweep.csv")
    assert len(rows) == 4
    header = rows[0]
    assert header[:3] == ["seed", "alpha_index", "alpha"]
    alphas = [float(row[2]) for row in rows[1:]]
    assert alphas[0] == pytest.approx(1e-3) and alphas[-1] == pytest.approx(5e-2)
    assert result.summary["bounds_dominate"]
    assert all(0.0 < q <= 1.0 for q in result.summary["q_theory"])


def test_qstar_theory_vs_experiment(tmp_path):
    raw = {"options": {"alpha_points": 2, "grid_points": 101, "q_points": 3, "iterations": 10}}
    result = _run("qstar_theory_vs_experiment", tmp_path, raw, replicas=8)
    assert "qstar_curves.csv" in result.files
    curves = _read_csv(result.out_dir / "qstar_curves.csv")
    assert len(curves) == 1 + 2 * 3 * 11
    grid = {float(row[3]) for row in curves[1:]}
    assert len(grid) == 3
    assert set(result.summary["q_empirical"]) <= grid


def test_qstar_race(tmp_path):
    raw = {"options": {"grid_points": 201}}
    result = _run("qstar_race", tmp_path, raw, replicas=16, iterations=20)
    rows = _read_csv(result.out_dir / "race.csv")
    labels = {row[1] for row in rows[1:]}
    assert "fom" in labels and "ufom_q1" in labels and len(labels) == 3
    assert 0.0 < result.summary["q_star"] < 1.0
    assert set(result.summary["calls_to_target"]) == labels


def test_weighted_toy_budget_and_weights(tmp_path):
    raw = {
        "problem": {"name": "weighted_toy", "params": {"n": 12, "n_val": 12, "corrupt_fraction": 0.25}},
        "inner": {"alpha": 0.2, "r": 5},
        "options": {"budget_iterations": 4},
    }
    result = _run("weighted_toy", tmp_path, raw)
    summary = result.summary
    per_exact = 6 + 10 + 5
    assert summary["budget"] == 4 * per_exact
    assert summary["corrupted"] == 3
    for label, (stats,) in summary["estimators"].items():
        assert stats["function_calls"] <= summary["budget"] + per_exact, label
        assert stats["function_calls"] >= summary["budget"] - per_exact, label
    adaptive = summary["estimators"]["adaptive_ufom"][0]
    assert 0.0 < adaptive["q_range"][0] <= adaptive["q_range"][1] <= 1.0
    weights = _read_csv(result.out_dir / "weights.csv")
    assert len(weights) == 1 + 3 * 12
    assert "q_trace.csv" in result.files


def test_verify_scenario_raises_after_writing(tmp_path, monkeypatch):
    report = VerificationReport()
    report.add("always_fails", False)
    monkeypatch.setattr("ablo.scenarios.run_verification_battery", lambda seed, quick: report)
    with pytest.raises(VerificationError):
        _run("verify", tmp_path)
    assert (tmp_path / "verify" / "verification.json").exists()
    assert main(["verify", "--out", str(tmp_path / "cli")]) == EXIT_FAILED


def test_cli_qstar(capsys):
    assert main(["qstar", "--d2", "0.1", "--v2", "1", "--r", "10"]) == EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert out["q_star"] == pytest.approx(0.2736, abs=1e-3)
    assert out["ufom_beats_exact"] is True
    assert out["expected_time_q_star"] < out["expected_time_exact"]


def test_cli_bounds(capsys):
    code = main(["bounds", "--problem", "counterexample", "--param", "a1=0.5", "--param", "a2=1.5",
                 "--param", "b2=10", "--param", "A=10", "--alpha", "0.01", "--r", "10", "--grid", "-50", "50", "101"])
    assert code == EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert out["regularity"]["L1"] == pytest.approx(1.5 * 10.5)
    assert out["D2_hat"] <= out["d_bound"] ** 2
    assert out["V2_hat"] <= out["v_bound"] ** 2


def test_cli_config_errors_exit_with_two(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"replicas": -3}))
    assert main(["divergence", "--config", str(bad), "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    assert main(["qstar", "--d2", "0.1", "--v2", "1", "--r", "10", "--eps", "0.7"]) == EXIT_CONFIG
    assert main(["bounds", "--problem", "weighted_toy"]) == EXIT_CONFIG


def test_cli_runs_a_scenario(tmp_path, capsys):
    out_dir = tmp_path / "div"
    code = main(["divergence", "--out", str(out_dir), "--replicas", "1", "--iterations", "5", "--seed", "2"])
    assert code == EXIT_OK
    printed = json.loads(capsys.readouterr().out)
    assert "fom_replica0.csv" in printed["files"]
    assert (out_dir / "summary.json").exists()


@pytest.mark.slow
def test_full_verification_battery(tmp_path):
    assert main(["verify", "--out", str(tmp_path)]) == EXIT_OK


@pytest.mark.slow
def test_theory_and_experiment_roughly_agree(tmp_path):
    raw = {"options": {"alpha_points": 5, "grid_points": 2001}}
    result = _run("qstar_theory_vs_experiment", tmp_path, raw, replicas=300)
    assert result.summary["agreement_fraction"] >= 0.8
