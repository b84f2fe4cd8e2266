import math

import numpy as np
import pytest

from app.core.errors import InsufficientDecayError, PreconditionError
from app.models.fields import DiscreteField, FieldKind
from app.models.geometry import BoundaryTag
from app.services import assembly_service as fem
from app.services.evolution_service import (
    ConstantFlux,
    EvolutionProblem,
    SeparableFlux,
    energy_functional,
    hypothesis_terms,
    lifting_solve,
    measure_decay_rate,
    propagate_spectral,
    step_implicit_euler,
    time_grid,
)
from app.services.spectral_service import build_eigensystem
from app.services.stationary_service import StationaryProblem, solve_stationary
from tests.conftest import rigid_rotation_flux


@pytest.fixture(scope="module")
def eigensystem(coarse_space, q_two):
    return build_eigensystem(coarse_space, q_two, count=12)


@pytest.fixture(scope="module")
def first_mode_start(rigid_solution, eigensystem):
    return rigid_solution.u + eigensystem.eigenfield(0)


def test_time_grid_is_snapped_and_ends_at_T():
    times = time_grid(2.0, 0.01, 40, "geometric")
    assert times[-1] == pytest.approx(2.0)
    assert np.all(np.diff(times) > 0.0)
    assert np.allclose(times / 0.01, np.round(times / 0.01))
    uniform = time_grid(1.0, 0.1, 5, "uniform")
    assert uniform[0] == pytest.approx(0.1) and uniform[-1] == pytest.approx(1.0)


def test_problem_preconditions(coarse_space, q_two):
    zero = DiscreteField.zeros(coarse_space, FieldKind.VELOCITY)
    with pytest.raises(PreconditionError):
        EvolutionProblem(coarse_space, q_two, zero, ConstantFlux(None), T=0.01, dt=0.1)
    radial = fem.interpolate_velocity(coarse_space, lambda x: x.copy())
    with pytest.raises(PreconditionError):
        EvolutionProblem(coarse_space, q_two, radial, ConstantFlux(None), T=1.0, dt=0.1)


def test_zero_data_gives_zero_trajectory(coarse_space, q_two):
    zero = DiscreteField.zeros(coarse_space, FieldKind.VELOCITY)
    problem = EvolutionProblem(coarse_space, q_two, zero, ConstantFlux(None), T=0.5, dt=0.05, n_samples=5)
    traj = step_implicit_euler(problem)
    assert all(not np.any(u.coefficients) for u in traj.velocities)
    assert energy_functional(traj) == 0.0


def test_stationary_state_is_invariant(coarse_space, q_two, rigid_solution, eigensystem):
    problem = EvolutionProblem(
        coarse_space, q_two, rigid_solution.u, ConstantFlux(rigid_rotation_flux), T=1.0, dt=0.05, n_samples=6
    )
    euler = step_implicit_euler(problem)
    scale = np.max(np.abs(rigid_solution.u.coefficients))
    for u in euler.velocities:
        assert np.max(np.abs(u.coefficients - rigid_solution.u.coefficients)) < 1e-8 * scale

    spectral = propagate_spectral(problem, eigensystem, stationary=rigid_solution)
    with pytest.raises(InsufficientDecayError):
        measure_decay_rate(spectral, rigid_solution, eigensystem)


def test_first_mode_decays_at_lambda1(coarse_space, q_two, rigid_solution, eigensystem, first_mode_start):
    lam = eigensystem.eigenvalues[0]
    T = 6.0 / lam
    problem = EvolutionProblem(
        coarse_space, q_two, first_mode_start, ConstantFlux(rigid_rotation_flux),
        T=T, dt=T / 300, grid_kind="uniform", n_samples=30,
    )
    spectral = propagate_spectral(problem, eigensystem, stationary=rigid_solution)
    assert not spectral.truncation_warning
    assert np.allclose(spectral.distances(rigid_solution.u), np.exp(-lam * spectral.times), rtol=1e-8)
    report = measure_decay_rate(spectral, rigid_solution, eigensystem)
    assert report.slope == pytest.approx(-lam, rel=0.02)

    euler = step_implicit_euler(problem)
    steps = np.round(euler.times / problem.dt)
    assert np.allclose(euler.distances(rigid_solution.u), (1.0 + lam * problem.dt) ** (-steps), rtol=1e-6)
    assert measure_decay_rate(euler, rigid_solution, eigensystem).slope == pytest.approx(-lam, rel=0.02)


def test_implicit_euler_is_first_order(coarse_space, q_two, rigid_solution, eigensystem, first_mode_start):
    T = 2.0 / eigensystem.eigenvalues[0]
    gaps = []
    for n_steps in (100, 200):
        problem = EvolutionProblem(
            coarse_space, q_two, first_mode_start, ConstantFlux(rigid_rotation_flux),
            T=T, dt=T / n_steps, grid_kind="uniform", n_samples=4,
        )
        euler = step_implicit_euler(problem)
        spectral = propagate_spectral(problem, eigensystem, stationary=rigid_solution)
        gaps.append(eigensystem.l2_norm(euler.velocities[-1] - spectral.velocities[-1]))
    assert 1.7 < gaps[0] / gaps[1] < 2.3


def test_generic_start_decays_within_spectral_corridor(coarse_space, q_two, rigid_solution, eigensystem):
    lam1, mu = eigensystem.eigenvalues[0], eigensystem.mu
    coefficients = np.random.default_rng(4).standard_normal(eigensystem.count)
    u0 = rigid_solution.u + eigensystem.expand(coefficients)
    T = 22.0 / lam1
    problem = EvolutionProblem(
        coarse_space, q_two, u0, ConstantFlux(rigid_rotation_flux),
        T=T, dt=T / 440, grid_kind="uniform", n_samples=44,
    )
    report = measure_decay_rate(propagate_spectral(problem, eigensystem, stationary=rigid_solution),
                                rigid_solution, eigensystem)
    assert -1.05 * lam1 <= report.slope <= -0.95 * mu


def test_implicit_euler_tracks_spectral_propagator(coarse_space, q_two, rigid_solution, eigensystem, first_mode_start):
    problem = EvolutionProblem(
        coarse_space, q_two, first_mode_start, ConstantFlux(rigid_rotation_flux),
        T=1.0, dt=1e-3, grid_kind="uniform", n_samples=5,
    )
    euler = step_implicit_euler(problem)
    spectral = propagate_spectral(problem, eigensystem, stationary=rigid_solution)
    assert euler.times[-1] == pytest.approx(1.0)
    gap = eigensystem.l2_norm(euler.velocities[-1] - spectral.velocities[-1])
    assert gap <= 1e-3 * eigensystem.l2_norm(spectral.velocities[-1])


def test_separable_flux_settles_on_its_limit(coarse_space, q_two, eigensystem):
    mu = eigensystem.mu
    flux = SeparableFlux.exponential(1.0, 0.5, theta=2.0 * mu)
    v = solve_stationary(StationaryProblem(coarse_space, q_two, g=flux.limit))
    zero = DiscreteField.zeros(coarse_space, FieldKind.VELOCITY)
    T = 6.0 / mu
    problem = EvolutionProblem(coarse_space, q_two, zero, flux, T=T, dt=T / 300, n_samples=20)
    euler = step_implicit_euler(problem)
    d = euler.distances(v.u)
    assert d[-1] < 0.05 * eigensystem.l2_norm(v.u)

    terms = hypothesis_terms(coarse_space, flux, mu, euler.times, problem.dt)
    for column in ("deviation", "rate", "convolution"):
        assert terms[column].iloc[-1] < 0.25 * terms[column].max()


def test_lifting_solve_is_linear(coarse_space):
    zero = lifting_solve(coarse_space, 0.0)
    assert not np.any(zero.coefficients)
    one = lifting_solve(coarse_space, 1.0)
    three = lifting_solve(coarse_space, 3.0)
    assert np.allclose(three.coefficients, 3.0 * one.coefficients, rtol=1e-10, atol=1e-12)
    inner = fem.boundary_traces(one, BoundaryTag.GAMMA_0)
    assert np.allclose(inner.values, 0.0, atol=1e-14)


def test_energy_functional_is_bounded_by_data(coarse_space, q_two, rigid_solution):
    zero = DiscreteField.zeros(coarse_space, FieldKind.VELOCITY)
    values = []
    for dt in (0.1, 0.05):
        problem = EvolutionProblem(coarse_space, q_two, zero, ConstantFlux(rigid_rotation_flux), T=1.0, dt=dt, n_samples=5)
        values.append(energy_functional(step_implicit_euler(problem)))
    assert values[0] > 0.0
    assert 0.8 < values[0] / values[1] < 1.25
    assert math.isfinite(values[1])
