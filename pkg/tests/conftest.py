import numpy as np
import pytest

from app.models.fields import DofSpace, RobinField
from app.services import mesh_service
from app.services.stationary_service import StationaryProblem, solve_stationary

R0, R1 = 0.5, 1.0


def rigid_rotation(points):
    return np.column_stack([-points[:, 1], points[:, 0]])


def rigid_rotation_flux(points, normals):
    return rigid_rotation(points) / R1


@pytest.fixture(scope="session")
def coarse_spec():
    return mesh_service.annulus_spec(R0, R1, 0.2)


@pytest.fixture(scope="session")
def hierarchy(coarse_spec):
    return mesh_service.refinement_hierarchy(coarse_spec, 2)


@pytest.fixture(scope="session")
def coarse_mesh(hierarchy):
    return hierarchy[0]


@pytest.fixture(scope="session")
def coarse_space(coarse_mesh):
    return DofSpace(coarse_mesh)


@pytest.fixture(scope="session")
def fine_space(hierarchy):
    return DofSpace(hierarchy[1])


@pytest.fixture(scope="session")
def finest_space(hierarchy):
    return DofSpace(hierarchy[2])


@pytest.fixture(scope="session")
def q_two(coarse_mesh):
    return RobinField.constant(coarse_mesh, 2.0)


@pytest.fixture(scope="session")
def rigid_solution(coarse_space, q_two):
    return solve_stationary(StationaryProblem(coarse_space, q_two, g=rigid_rotation_flux))
