import json
import math

import pytest

from boundedgeo.cli import ConfigError, load_config, main, run

TWO_PI = 2 * math.pi


def write_config(tmp_path, payload, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(payload))
    return str(path)


def eigen_config(outdir, n=32):
    return {
        "task": "eigen",
        "domain": {
            "base": {"family": "flat", "dim": 1, "period": TWO_PI},
            "top": "1",
            "bot": "0",
            "dirichlet": ["bottom"],
            "neumann": ["top"],
        },
        "numeric": {"n": n, "seed": 0},
        "output": {"dir": str(outdir)},
    }


def test_minimal_eigen_config_valid(tmp_path):
    path = write_config(tmp_path, eigen_config(tmp_path / "out"))
    config = load_config(path)
    assert config.task == "eigen"
    assert config.numeric["n"] == 32


def test_unknown_key_named(tmp_path):
    cfg = eigen_config(tmp_path)
    cfg["domain"]["topp"] = "1"
    with pytest.raises(ConfigError, match="topp"):
        load_config(write_config(tmp_path, cfg))


def test_expression_error_carries_position(tmp_path):
    cfg = eigen_config(tmp_path)
    cfg["domain"]["top"] = "sin(x"
    with pytest.raises(Exception, match="position"):
        load_config(write_config(tmp_path, cfg))


def test_json_error_carries_location(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{ not json }")
    with pytest.raises(ConfigError, match="line 1"):
        load_config(str(path))


def test_missing_required_field(tmp_path):
    cfg = eigen_config(tmp_path)
    del cfg["numeric"]["n"]
    with pytest.raises(ConfigError, match="numeric.n"):
        load_config(write_config(tmp_path, cfg))


def test_describe_exit_zero(tmp_path):
    cfg = eigen_config(tmp_path / "out")
    cfg["task"] = "describe"
    cfg["numeric"] = {}
    path = write_config(tmp_path, cfg)
    assert main(["describe", "--config", path]) == 0
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert report["task"] == "describe"
    assert report["data"]["eps"] == 1.0


def test_eigen_report_contains_constants(tmp_path):
    path = write_config(tmp_path, eigen_config(tmp_path / "out"))
    code = main(["eigen", "--config", path])
    assert code == 0
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    names = {f["name"] for f in report["findings"]}
    assert {"eigenvalue-oracle", "constant-oracle", "gamma-oracle"} <= names
    for f in report["findings"]:
        assert f["passed"]
        assert f["value"] is not None and f["bound"] is not None
    assert "lambda_min" in report["data"] and "gamma" in report["data"]


def test_family_infinite_width_exit_two(tmp_path):
    cfg = {
        "task": "family",
        "domains": [
            eigen_config(tmp_path)["domain"],
            {
                "base": {"family": "flat", "dim": 1, "period": TWO_PI},
                "top": "1",
                "bot": "0",
                "dirichlet": [],
                "neumann": ["top", "bottom"],
            },
        ],
        "numeric": {"n": 16, "p": 2, "trials": 10, "seed": 0},
        "output": {"dir": str(tmp_path / "out")},
    }
    path = write_config(tmp_path, cfg)
    assert main(["family", "--config", path]) == 2
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert "infinite width" in report["findings"][0]["detail"]


def test_task_mismatch_is_error(tmp_path):
    path = write_config(tmp_path, eigen_config(tmp_path))
    assert main(["describe", "--config", path]) == 1


def test_no_dirichlet_eigen_reports_failure(tmp_path):
    cfg = eigen_config(tmp_path / "out", n=16)
    cfg["domain"]["dirichlet"] = []
    cfg["domain"]["neumann"] = ["top", "bottom"]
    path = write_config(tmp_path, cfg)
    assert main(["eigen", "--config", path]) == 2
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert "Poincare fails" in report["findings"][0]["detail"]


def test_seed_override_recorded(tmp_path):
    path = write_config(tmp_path, eigen_config(tmp_path / "out"))
    config = load_config(path)
    run(config, out_dir=str(tmp_path / "out"), seed=7)
    assert config.numeric["seed"] == 7


def test_findings_carry_bounds_and_tolerances(tmp_path):
    cfg = eigen_config(tmp_path / "out")
    path = write_config(tmp_path, cfg)
    main(["eigen", "--config", path])
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    for f in report["findings"]:
        assert {"name", "passed", "value", "bound", "tolerance", "detail"} <= set(f)


def test_solve_emits_solution_and_matrix(tmp_path):
    cfg = eigen_config(tmp_path / "out", n=12)
    cfg["task"] = "solve"
    cfg["numeric"] = {"n": 12, "lambda": 0.3, "seed": 0,
                      "manufactured_u": "sin(1.5707963267948966*t)*cos(x)",
                      "export_matrix": True}
    path = write_config(tmp_path, cfg)
    assert main(["solve", "--config", path]) == 0
    out = tmp_path / "out"
    assert (out / "solution.csv").exists()
    header = (out / "matrix.csv").read_text().splitlines()[0]
    assert header == "row,col,value"


def test_worker_cap_env(monkeypatch):
    from boundedgeo.cli import parallel_map, worker_count

    monkeypatch.setenv("BOUNDEDGEO_THREADS", "3")
    assert worker_count() == 3
    assert parallel_map(lambda v: v * v, range(7)) == [v * v for v in range(7)]
    monkeypatch.setenv("BOUNDEDGEO_THREADS", "bogus")
    assert worker_count() == 1
