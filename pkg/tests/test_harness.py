import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from profilebo.cli import main
from profilebo.errors import ConfigError
from profilebo.harness import ExperimentConfig, export_plotdata, read_metrics, run_experiment

TINY = dict(function="branin", surrogate="gp", method="pbo", n_init=6, m_total=8,
            repetitions=2, axis_size=8, final_grid=12, n_samples=60, cond_size=8,
            truth_resolution=51)


def _tree(root):
    return sorted(os.path.relpath(os.path.join(d, f), root)
                  for d, _, fs in os.walk(root) for f in fs)


@pytest.fixture(scope="module")
def comparison(tmp_path_factory):
    root = tmp_path_factory.mktemp("cmp")
    for m in ("lhs", "bo_ei", "pei", "pbo"):
        run_experiment(ExperimentConfig(**{**TINY, "method": m}), output_dir=root / m)
    return root


# --- config -----------------------------------------------------------------------


@given(n=st.integers(2, 20), extra=st.integers(0, 20), reps=st.integers(1, 50),
       method=st.sampled_from(["lhs", "bo_ei", "pei", "pbo"]),
       surrogate=st.sampled_from(["gp", "dgp"]), frac=st.floats(0.05, 1.0))
@settings(max_examples=50)
def test_config_round_trip(n, extra, reps, method, surrogate, frac):
    cfg = ExperimentConfig(n_init=n, m_total=n + extra, repetitions=reps, method=method,
                           surrogate=surrogate, fringe_frac=frac)
    assert ExperimentConfig.from_json(cfg.to_json()) == cfg


@pytest.mark.parametrize("bad", [
    {"function": "nope"}, {"method": "random"}, {"surrogate": "rf"},
    {"n_init": 10, "m_total": 5}, {"repetitions": 0}, {"control_index": 2},
])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        ExperimentConfig(**bad)


def test_config_unknown_field_and_bad_json():
    with pytest.raises(ConfigError, match="unknown config fields"):
        ExperimentConfig.from_dict({"functon": "branin"})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_json("{not json")


def test_override():
    cfg = ExperimentConfig().override(seed=5, method=None)
    assert cfg.seed == 5 and cfg.method == "pbo"
    with pytest.raises(ConfigError):
        ExperimentConfig().override(speed=1)


# --- run_experiment -------------------------------------------------------------------


def test_run_writes_expected_layout(tmp_path):
    res = run_experiment(ExperimentConfig(**TINY), output_dir=tmp_path)
    files = _tree(tmp_path)
    for f in ("config.json", "truth.csv", "metrics.csv", "summary.csv",
              "rep_000/result.json", "rep_001/profile.csv", "rep_001/trace.jsonl",
              "rep_000/design.csv", "rep_000/initial_profile.csv"):
        assert f in files
    rows = read_metrics(tmp_path / "metrics.csv")
    assert [r["seed"] for r in rows] == [0, 1]
    assert all(r["n_final"] == 8 and r["status"] == "ok" for r in rows)
    assert len(res["rows"]) == 2
    with open(tmp_path / "rep_000" / "trace.jsonl") as fh:
        assert len(fh.readlines()) == 2


def test_summary_mean_matches_csv(tmp_path):
    res = run_experiment(ExperimentConfig(**{**TINY, "repetitions": 3}), output_dir=tmp_path)
    rows = read_metrics(tmp_path / "metrics.csv")
    with open(tmp_path / "summary.csv", newline="") as fh:
        summary = {r["metric"]: r for r in csv.DictReader(fh)}
    for k in ("rmse", "maxad", "avgci", "coverage", "init_rmse"):
        vals = [r[k] for r in rows]
        assert abs(float(summary[k]["mean"]) - np.mean(vals)) <= 1e-12
        assert float(summary[k]["min"]) == min(vals)
        assert res["summary"][k][0] == float(summary[k]["mean"])


def test_zero_acquisitions_reports_initial_fit(tmp_path):
    run_experiment(ExperimentConfig(**{**TINY, "m_total": 6, "repetitions": 1}),
                   output_dir=tmp_path)
    (row,) = read_metrics(tmp_path / "metrics.csv")
    for k in ("rmse", "maxad", "avgci", "coverage"):
        assert row[k] == row["init_" + k]
    assert row["n_final"] == 6


def test_rerun_is_byte_identical(tmp_path):
    cfg = ExperimentConfig(**TINY)
    run_experiment(cfg, output_dir=tmp_path / "a")
    run_experiment(cfg, output_dir=tmp_path / "b")
    for f in _tree(tmp_path / "a"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


def test_parallel_matches_serial(tmp_path):
    cfg = ExperimentConfig(**TINY)
    run_experiment(cfg, output_dir=tmp_path / "s")
    run_experiment(cfg, jobs=2, output_dir=tmp_path / "p")
    assert (tmp_path / "s/metrics.csv").read_bytes() == (tmp_path / "p/metrics.csv").read_bytes()


def test_resume_reuses_completed_reps(tmp_path):
    cfg = ExperimentConfig(**TINY)
    run_experiment(cfg, output_dir=tmp_path)
    marker = tmp_path / "rep_000" / "result.json"
    before = marker.stat().st_mtime_ns
    (tmp_path / "rep_001" / "result.json").unlink()
    run_experiment(cfg, output_dir=tmp_path)
    assert marker.stat().st_mtime_ns == before
    assert (tmp_path / "rep_001" / "result.json").exists()


def test_refuses_foreign_directory(tmp_path):
    run_experiment(ExperimentConfig(**TINY), output_dir=tmp_path)
    with pytest.raises(ConfigError, match="different configuration"):
        run_experiment(ExperimentConfig(**{**TINY, "seed": 9}), output_dir=tmp_path)


def test_failed_rep_is_recorded_and_others_continue(tmp_path, monkeypatch):
    import profilebo.harness as hmod
    from profilebo.errors import NumericalFailure

    real = hmod.METHODS["pbo"]

    def flaky(fn, init, m, cfg):
        if cfg.seed == 1:
            raise NumericalFailure("forced failure")
        return real(fn, init, m, cfg)

    monkeypatch.setitem(hmod.METHODS, "pbo", flaky)
    res = run_experiment(ExperimentConfig(**{**TINY, "repetitions": 3}), output_dir=tmp_path)
    assert [r["status"] for r in res["rows"]] == ["ok", "error", "ok"]
    err = json.loads((tmp_path / "rep_001" / "error.json").read_text())
    assert err == {"error": "NumericalFailure", "message": "forced failure"}
    assert not (tmp_path / "rep_001" / "result.json").exists()
    assert res["summary"]["rmse"][3] == 2


def test_external_blackbox_runs(tmp_path):
    script = tmp_path / "sim.py"
    script.write_text("import sys\nv=[float(t) for t in sys.stdin.read().split()]\n"
                      "print((v[0]-0.3)**2 + (v[1]-2)**2)\n")
    cfg = ExperimentConfig(function="ext", command=[sys.executable, str(script)],
                           native_bounds=[[0, 1], [0, 4]], n_init=5, m_total=6, repetitions=1,
                           axis_size=5, final_grid=10, n_samples=50, cond_size=8)
    run_experiment(cfg, output_dir=tmp_path / "out")
    (row,) = read_metrics(tmp_path / "out" / "metrics.csv")
    assert row["status"] == "ok" and row["n_final"] == 6
    assert not (tmp_path / "out" / "truth.csv").exists()


def test_writes_only_inside_output_dir(tmp_path):
    out = tmp_path / "exp"
    run_experiment(ExperimentConfig(**{**TINY, "repetitions": 1}), output_dir=out)
    assert [p.name for p in tmp_path.iterdir()] == ["exp"]


# --- export ----------------------------------------------------------------------------


def test_export_empty_dir_lists_expected(tmp_path):
    with pytest.raises(FileNotFoundError, match="config.json.*metrics.csv"):
        export_plotdata(tmp_path)


def test_export_single_rep(tmp_path):
    run_experiment(ExperimentConfig(**{**TINY, "repetitions": 1}), output_dir=tmp_path / "e")
    res = export_plotdata(tmp_path / "e", tmp_path / "plots")
    assert len(res["curves"]) == 1
    with open(res["metrics_table"], newline="") as fh:
        assert len(list(csv.DictReader(fh))) == 1
    with open(res["curves"][0], newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == TINY["final_grid"]
    assert all(np.isfinite(float(r["truth"])) for r in rows)


def test_export_combined_comparison(comparison):
    res = export_plotdata(comparison)
    with open(res["metrics_table"], newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4 * TINY["repetitions"]
    assert {r["method"] for r in rows} == {"lhs", "bo_ei", "pei", "pbo"}
    with open(res["coverage_avgci"], newline="") as fh:
        assert len(list(csv.DictReader(fh))) == 4 * TINY["repetitions"]
    assert len(res["curves"]) == 4 * TINY["repetitions"]


# --- CLI -------------------------------------------------------------------------------


def _err_json(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_cli_run_with_override(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(ExperimentConfig(**{**TINY, "repetitions": 1}).to_json())
    out = tmp_path / "res"
    assert main(["run", str(cfg), "--output-dir", str(out), "--seed", "3"]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed["output_dir"] == str(out)
    assert json.loads((out / "config.json").read_text())["seed"] == 3


def test_cli_run_bad_config(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"function": "nope"}))
    assert main(["run", str(cfg)]) == 2
    err = _err_json(capsys)
    assert err["error"] == "ConfigError" and "nope" in err["message"]


def test_cli_missing_file(tmp_path, capsys):
    assert main(["run", str(tmp_path / "missing.json")]) == 4
    assert _err_json(capsys)["error"] == "FileNotFoundError"
    assert main(["export", str(tmp_path)]) == 4
    assert "expected" in _err_json(capsys)["message"]


def test_cli_truth(capsys):
    assert main(["truth", "branin", "--grid", "5", "--resolution", "51"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "xstar,T" and len(lines) == 6
    assert float(lines[1].split(",")[0]) == 0.0 and float(lines[-1].split(",")[0]) == 1.0
    assert main(["truth", "branin", "--grid", "1"]) == 2


def test_cli_candidates(tmp_path, capsys):
    design = tmp_path / "design.csv"
    X = np.random.default_rng(0).random((8, 3))
    np.savetxt(design, np.column_stack([X, X.sum(axis=1)]), delimiter=",",
               header="x1,x2,x3,y", comments="")
    assert main(["candidates", str(design), "--control-index", "0"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "x2,x3,tag"
    pts = np.array([[float(v) for v in ln.split(",")[:2]] for ln in lines[1:]])
    assert np.all((pts >= 0) & (pts <= 1))
    assert main(["candidates", str(design), "--control-index", "0", "--axis-size", "3"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "x1,x2,x3,tag" and (len(lines) - 1) % 3 == 0


def test_cli_candidates_degenerate(tmp_path, capsys):
    design = tmp_path / "d.csv"
    design.write_text("0.1,0.1\n0.5,0.5\n0.9,0.9\n")
    assert main(["candidates", str(design)]) == 0
    bad = tmp_path / "b.csv"
    bad.write_text("0.1,1.5\n0.5,0.5\n0.2,0.9\n")
    assert main(["candidates", str(bad)]) == 2
    assert _err_json(capsys)["error"] == "InvalidArgument"


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "profilebo.cli", "--help"],
                         capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("run", "export", "truth", "candidates"):
        assert cmd in out.stdout
