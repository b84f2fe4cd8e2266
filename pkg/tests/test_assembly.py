import math

import numpy as np
import pytest

from app.core.errors import PreconditionError, RobinBoundError
from app.models.fields import DiscreteField, FieldKind, RobinField
from app.models.geometry import BoundaryTag
from app.services import assembly_service as fem
from app.services import mesh_service
from tests.conftest import rigid_rotation, rigid_rotation_flux


def _constant(points):
    return np.column_stack([np.ones(len(points)), np.zeros(len(points))])


def _identity(points):
    return points.copy()


def test_stiffness_of_rotation_is_twice_the_area(coarse_space):
    A = fem.assemble_stiffness(coarse_space)
    u = fem.interpolate_velocity(coarse_space, rigid_rotation).coefficients
    area = coarse_space.mesh.areas.sum()
    assert float(u @ (A @ u)) == pytest.approx(2.0 * area, rel=1e-12)
    assert abs(2.0 * area - 2.0 * math.pi * (1.0 - 0.25)) < 0.05


def test_stiffness_kills_constants_and_is_symmetric(coarse_space):
    A = fem.assemble_stiffness(coarse_space)
    c = fem.interpolate_velocity(coarse_space, _constant).coefficients
    assert np.max(np.abs(A @ c)) < 1e-10
    assert abs(A - A.T).max() <= 1e-12


def test_velocity_mass_of_constant_is_area(coarse_space):
    M = fem.assemble_velocity_mass(coarse_space)
    c = fem.interpolate_velocity(coarse_space, _constant).coefficients
    assert float(c @ (M @ c)) == pytest.approx(coarse_space.mesh.areas.sum(), rel=1e-12)
    assert abs(M - M.T).max() <= 1e-12


def test_velocity_mass_is_positive_definite(coarse_space):
    M = fem.assemble_velocity_mass(coarse_space).toarray()
    assert np.linalg.eigvalsh(M).min() > 0.0


def test_robin_mass_of_constant_is_gamma0_length(coarse_space):
    q = RobinField.constant(coarse_space.mesh, 1.0)
    R = fem.assemble_robin_mass(coarse_space, q)
    c = fem.interpolate_velocity(coarse_space, _constant).coefficients
    length = mesh_service.boundary_length(coarse_space.mesh, BoundaryTag.GAMMA_0)
    assert float(c @ (R @ c)) == pytest.approx(length, rel=1e-12)
    assert length == pytest.approx(2.0 * math.pi * 0.5, rel=0.01)


def test_robin_mass_is_linear_in_q(coarse_space):
    R1 = fem.assemble_robin_mass(coarse_space, RobinField.constant(coarse_space.mesh, 1.5))
    R2 = fem.assemble_robin_mass(coarse_space, RobinField.constant(coarse_space.mesh, 3.0))
    assert abs(R2 - 2.0 * R1).max() < 1e-13


def test_robin_mass_ignores_gamma_e_fields(coarse_space):
    R = fem.assemble_robin_mass(coarse_space, RobinField.constant(coarse_space.mesh, 1.0))
    u = np.zeros(coarse_space.velocity_dof_count)
    u[coarse_space.boundary_velocity_dofs(BoundaryTag.GAMMA_E)] = 1.0
    assert float(u @ (R @ u)) == 0.0


def test_robin_mass_rejects_coefficient_below_alpha(coarse_space):
    q = RobinField.constant(coarse_space.mesh, 1.0).with_values(
        np.full(len(coarse_space.mesh.boundary_vertex_ids(BoundaryTag.GAMMA_0)), 0.5)
    )
    with pytest.raises(RobinBoundError):
        fem.assemble_robin_mass(coarse_space, q)


def test_divergence_of_rotation_and_constants_vanishes(coarse_space):
    D = fem.assemble_divergence(coarse_space)
    assert D.shape == (coarse_space.pressure_dof_count, coarse_space.velocity_dof_count)
    for fn in (rigid_rotation, _constant):
        u = fem.interpolate_velocity(coarse_space, fn).coefficients
        assert np.max(np.abs(D @ u)) <= 1e-12


def test_divergence_of_identity_is_twice_the_area(coarse_space):
    D = fem.assemble_divergence(coarse_space)
    u = fem.interpolate_velocity(coarse_space, _identity).coefficients
    ones = np.ones(coarse_space.pressure_dof_count)
    assert float(ones @ (D @ u)) == pytest.approx(2.0 * coarse_space.mesh.areas.sum(), rel=1e-12)


def test_neumann_load(coarse_space):
    assert not np.any(fem.assemble_neumann_load(coarse_space, None))
    zero = fem.assemble_neumann_load(coarse_space, lambda x, n: np.zeros_like(x))
    assert not np.any(zero)

    b = fem.assemble_neumann_load(coarse_space, rigid_rotation_flux)
    u = fem.interpolate_velocity(coarse_space, rigid_rotation).coefficients
    assert float(b @ u) == pytest.approx(2.0 * math.pi, rel=0.02)

    b3 = fem.assemble_neumann_load(coarse_space, lambda x, n: 3.0 * rigid_rotation_flux(x, n))
    assert np.allclose(b3, 3.0 * b, rtol=1e-14, atol=1e-15)


def test_boundary_data_shape_is_checked(coarse_space):
    with pytest.raises(PreconditionError):
        fem.assemble_neumann_load(coarse_space, lambda x, n: np.zeros(len(x)))


def test_interpolated_quadratic_has_no_error(coarse_space):
    def quadratic(points):
        return np.column_stack([points[:, 0] ** 2, points[:, 0] * points[:, 1]])

    def quadratic_gradient(points):
        x, y = points[:, 0], points[:, 1]
        zero = np.zeros_like(x)
        return np.stack([np.column_stack([2 * x, zero]), np.column_stack([y, x])], axis=1)

    u = fem.interpolate_velocity(coarse_space, quadratic)
    assert fem.l2_error(u, quadratic) < 1e-12
    assert fem.h1_seminorm_error(u, quadratic_gradient) < 1e-12


def test_boundary_traces_of_rotation(coarse_space):
    u = fem.interpolate_velocity(coarse_space, rigid_rotation)
    tr = fem.boundary_traces(u, BoundaryTag.GAMMA_E)
    assert np.allclose(tr.values, rigid_rotation(tr.points), atol=1e-13)
    expected = np.einsum("ij,nj->ni", np.array([[0.0, -1.0], [1.0, 0.0]]), tr.normals)
    assert np.allclose(tr.normal_derivative, expected, atol=1e-12)


def test_discrete_fields_check_their_space(coarse_space, fine_space):
    a = DiscreteField.zeros(coarse_space, FieldKind.VELOCITY)
    b = DiscreteField.zeros(fine_space, FieldKind.VELOCITY)
    with pytest.raises(PreconditionError):
        a + b
    with pytest.raises(PreconditionError):
        DiscreteField(coarse_space, FieldKind.PRESSURE, np.zeros(3))


def test_scalar_dirichlet_reproduces_radial_harmonic(fine_space):
    psi = fem.solve_scalar_dirichlet(fine_space, 0.0, {BoundaryTag.GAMMA_E: 1.0, BoundaryTag.GAMMA_0: 0.0})
    exact = lambda x: np.log(np.hypot(x[:, 0], x[:, 1]) / 0.5) / math.log(2.0)
    assert fem.l2_error(psi, exact) < 1e-2
