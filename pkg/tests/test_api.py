import pytest
from fastapi.testclient import TestClient

from app.core.config import settings
from app.main import app

client = TestClient(app)
PREFIX = settings.API_V1_STR


def test_root():
    response = client.get("/")
    assert response.status_code == 200
    assert response.json()["version"] == settings.VERSION


def test_health():
    response = client.get(f"{PREFIX}/health")
    assert response.status_code == 200
    assert response.json() == {"status": "ok"}


def test_list_subcommands():
    response = client.get(f"{PREFIX}/experiments/subcommands")
    assert response.status_code == 200
    names = response.json()
    assert "mesh" in names and "stability-curve" in names


def test_unknown_subcommand_is_404():
    response = client.post(f"{PREFIX}/experiments/simulate", json={})
    assert response.status_code == 404


def test_invalid_config_is_422():
    response = client.post(f"{PREFIX}/experiments/mesh", json={"geometry": {"R0": 2.0, "R1": 1.0}})
    assert response.status_code == 422


def test_run_mesh(tmp_path):
    payload = {"geometry": {"refinements": 0}, "output_dir": str(tmp_path)}
    response = client.post(f"{PREFIX}/experiments/mesh", json=payload)
    assert response.status_code == 200
    body = response.json()
    assert body["subcommand"] == "mesh"
    assert "mesh/mesh_levels.csv" in body["artifacts"]
    assert (tmp_path / "mesh" / "mesh_levels.csv").exists()


def test_toolkit_errors_map_to_status(tmp_path):
    payload = {"output_dir": str(tmp_path / "empty")}
    response = client.post(f"{PREFIX}/experiments/report", json=payload)
    assert response.status_code == 422
    assert response.json()["error"] == "ConfigError"


@pytest.mark.parametrize("seed", [-1])
def test_negative_seed_is_rejected(seed):
    response = client.post(f"{PREFIX}/experiments/mesh", params={"seed": seed}, json={})
    assert response.status_code == 422
