import json

import pandas as pd
import pytest

from app.cli import main
from app.services.experiment_service import key_results
from app.services.export_service import PARTIAL_RUN_MARKER, read_artifact_csv

SMALL = {"geometry": {"h": 0.2, "refinements": 0}}


@pytest.fixture
def write_config(tmp_path):
    def _write(payload, name="run.json"):
        path = tmp_path / name
        path.write_text(json.dumps(payload))
        return str(path)
    return _write


def test_mesh_writes_artifacts(tmp_path, write_config, capsys):
    out = tmp_path / "out"
    assert main(["mesh", "--config", write_config(SMALL), "--out", str(out)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["subcommand"] == "mesh"
    assert "mesh/mesh_levels.csv" in summary["artifacts"]
    assert (out / "mesh" / "mesh_level0.vtk").exists()
    assert not (out / PARTIAL_RUN_MARKER).exists()


def test_report_aggregates_previous_csvs(tmp_path, write_config):
    out = tmp_path / "out"
    config = write_config(SMALL)
    assert main(["mesh", "--config", config, "--out", str(out)]) == 0
    assert main(["report", "--config", config, "--out", str(out)]) == 0
    assert (out / "report.csv").exists()


def test_report_without_artifacts_fails(tmp_path, write_config):
    assert main(["report", "--config", write_config(SMALL), "--out", str(tmp_path / "empty")]) == 1


def test_unknown_config_key_is_rejected(tmp_path, write_config):
    bad = dict(SMALL, solver_mode="fast")
    assert main(["mesh", "--config", write_config(bad), "--out", str(tmp_path)]) == 1


def test_empty_noise_levels_are_rejected(tmp_path, write_config):
    bad = dict(SMALL, inverse={"noise_levels": []})
    assert main(["stability-curve", "--config", write_config(bad), "--out", str(tmp_path)]) == 1


def test_missing_config_file(tmp_path):
    assert main(["mesh", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 1


def test_threads_must_be_positive(tmp_path, write_config):
    assert main(["mesh", "--config", write_config(SMALL), "--out", str(tmp_path), "--threads", "0"]) == 1


def test_unknown_subcommand_exits():
    with pytest.raises(SystemExit):
        main(["simulate"])


def test_failed_run_leaves_marker(tmp_path, write_config):
    bad = dict(SMALL, inverse={"m": 5.0, "identifiability_pairs": 0})
    out = tmp_path / "out"
    assert main(["invert", "--config", write_config(bad), "--out", str(out)]) == 3
    marker = (out / PARTIAL_RUN_MARKER).read_text()
    assert "stage=invert" in marker
    assert "EmptyCompactSetError" in marker


def test_stability_curve_is_reproducible(tmp_path, write_config):
    payload = dict(SMALL, inverse={"noise_levels": [1e-2, 1e-3], "trials": 2})
    config = write_config(payload)
    bodies = []
    for threads, name in ((1, "a"), (2, "b")):
        out = tmp_path / name
        assert main(["stability-curve", "--config", config, "--out", str(out), "--threads", str(threads), "--seed", "3"]) == 0
        bodies.append((out / "inverse" / "stability.csv").read_text())
    assert bodies[0] == bodies[1]


def test_eigs_exports_matrices(tmp_path, write_config):
    payload = dict(SMALL, solver={"eigen_count": 4})
    out = tmp_path / "out"
    assert main(["eigs", "--config", write_config(payload), "--out", str(out)]) == 0
    assert (out / "eigs" / "eigenvalues.csv").exists()
    header = (out / "eigs" / "stiffness.mtx").read_text().splitlines()[:3]
    assert header[0].startswith("%%MatrixMarket")
    assert any("config_hash=" in line for line in header)


def test_report_tabulates_key_results(tmp_path, write_config):
    payload = {
        "geometry": {"h": 0.2, "refinements": 1},
        "solver": {"eigen_count": 4},
        "inverse": {
            "noise_levels": [1e-1, 1e-2],
            "trials": 2,
            "contrast_frequencies": [2, 3, 4],
            "identifiability_pairs": 0,
        },
    }
    config = write_config(payload)
    out = tmp_path / "out"
    for subcommand in ("solve-stationary", "eigs", "stability-curve", "report"):
        assert main([subcommand, "--config", config, "--out", str(out)]) == 0

    report = read_artifact_csv(out / "report.csv")
    values = dict(zip(report["quantity"], report["value"]))
    assert any(name.endswith("_order") for name in values)
    assert values["lambda_1"] > 0.0
    assert 0.0 < values["mu"] <= values["lambda_1"] + 1e-9
    assert values["stability_exponent"] == 0.5
    assert values["stability_C"] > 0.0
    assert values["stability_R2"] <= 1.0
    assert values["contrast_C1"] > 0.0
    assert "contrast_exponent" in values
    assert set(report["source"]) >= {"eigs/eigenvalues.csv", "inverse/stability.csv", "inverse/contrast.csv"}

    files = read_artifact_csv(out / "report_files.csv")
    assert "inverse/stability.csv" in set(files["file"])
    assert "report.csv" not in set(files["file"])


def test_key_results_count_carleman_violations(tmp_path):
    (tmp_path / "carleman").mkdir()
    pd.DataFrame({
        "field_id": ["a", "b", "c"],
        "lhs": [1.0, 2.0, 3.0],
        "rhs": [2.0, 1.0, 3.0],
        "margin": [1.0, -1.0, 0.0],
    }).to_csv(tmp_path / "carleman" / "sweep.csv", index=False)
    summary = key_results(tmp_path)
    values = dict(zip(summary["quantity"], summary["value"]))
    assert values["carleman_violations"] == 1
    assert values["carleman_min_margin"] == -1.0


def test_unknown_nested_config_key_is_rejected(tmp_path, write_config):
    bad = dict(SMALL, inverse={"trails": 3})
    assert main(["mesh", "--config", write_config(bad), "--out", str(tmp_path)]) == 1


def test_inverted_radii_exit_as_config_error(tmp_path, write_config):
    bad = {"geometry": {"R0": 1.0, "R1": 0.9, "h": 0.01, "refinements": 0}}
    assert main(["mesh", "--config", write_config(bad), "--out", str(tmp_path)]) == 1
