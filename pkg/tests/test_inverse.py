import numpy as np
import pytest

from app.core.errors import EmptyCompactSetError, FitFailureError, FluxTooSmallError, PreconditionError
from app.models.fields import RobinField
from app.services.evolution_service import normal_profile
from app.services.inverse_service import (
    TwinExperiment,
    contrast_sweep,
    evolution_stability_sweep,
    fit_log_law,
    gamma_e_velocity_norm,
    identifiability_experiment,
    reconstruct_q_difference,
    recover_constant_q,
    select_K,
    stability_sweep,
)
from tests.conftest import R0, rigid_rotation_flux


def _twin(space, q1, q2, g=rigid_rotation_flux, m=0.25):
    mesh = space.mesh
    return TwinExperiment(space, RobinField.constant(mesh, q1), RobinField.constant(mesh, q2), g, m)


@pytest.fixture(scope="module")
def equal_twin(coarse_space):
    return _twin(coarse_space, 2.0, 2.0)


# ── Compact subset ─────────────────────────────────────────────────

def test_select_K_covers_gamma0_below_rotation_speed(rigid_solution):
    K = select_K(rigid_solution.u, 0.8 * R0)
    assert len(K.indices) == K.n_total
    assert K.measure == pytest.approx(np.pi, rel=1e-2)


def test_select_K_rejects_unreachable_threshold(rigid_solution):
    with pytest.raises(EmptyCompactSetError):
        select_K(rigid_solution.u, 1.2 * R0)
    with pytest.raises(PreconditionError):
        select_K(rigid_solution.u, 0.0)


# ── Reconstruction ─────────────────────────────────────────────────

def test_equal_coefficients_reconstruct_zero(equal_twin):
    assert np.all(equal_twin.truth == 0.0)
    assert equal_twin.noiseless_error() <= 1e-8


def test_twin_error_decreases_under_refinement(coarse_space, fine_space):
    errors = []
    for space in (coarse_space, fine_space):
        twin = _twin(space, 2.0, 3.0)
        rec = reconstruct_q_difference(twin.sol1, twin.sol2, twin.q2, twin.K)
        errors.append(rec.error(twin.truth) / twin.K.l2_norm(twin.truth))
    assert errors[1] < errors[0]
    assert errors[1] < 0.3


def test_constant_q_recovered_from_radial_flux(fine_space):
    twin = _twin(fine_space, 2.0, 3.0, g=normal_profile(1.0))
    q1 = recover_constant_q(twin.sol1, twin.sol2, 3.0, m1=1e-3)
    assert q1 == pytest.approx(2.0, abs=0.1)


def test_constant_q_needs_flux_through_gamma_e(coarse_space):
    twin = _twin(coarse_space, 2.0, 3.0)
    with pytest.raises(FluxTooSmallError):
        recover_constant_q(twin.sol1, twin.sol2, 3.0, m1=1e-3)


# ── Stability sweeps ───────────────────────────────────────────────

def test_stability_sweep_is_deterministic(equal_twin):
    levels = [1e-1, 1e-2, 1e-3]
    serial = stability_sweep(equal_twin, levels, trials=3, seed=7, threads=1)
    threaded = stability_sweep(equal_twin, levels, trials=3, seed=7, threads=2)
    assert serial.records.equals(threaded.records)
    assert len(serial.records) == 9

    medians = serial.medians().to_numpy()
    assert np.all(np.diff(medians) <= 0.0)
    assert serial.records["B"].gt(0.0).all()


def test_stability_sweep_rejects_empty_levels(equal_twin):
    with pytest.raises(PreconditionError):
        stability_sweep(equal_twin, [], trials=2)
    with pytest.raises(PreconditionError):
        stability_sweep(equal_twin, [1e-2], trials=0)


def test_zero_noise_reproduces_noiseless_error(equal_twin):
    curve = stability_sweep(equal_twin, [0.0], trials=1)
    assert curve.records["err_L2K"].iloc[0] <= 1e-6
    assert curve.fit is None


def test_evolution_sweep_produces_records(equal_twin):
    curve = evolution_stability_sweep(
        equal_twin, [1e-2, 1e-3], trials=2, horizon_factor=2.0, n_steps=20, n_samples=4
    )
    assert len(curve.records) == 4
    assert curve.records["B"].gt(0.0).all()
    assert curve.medians().iloc[0] >= curve.medians().iloc[-1]


def test_noise_B_and_error_scale_linearly_with_level(equal_twin):
    full = stability_sweep(equal_twin, [2e-2], trials=3, seed=5).records
    half = stability_sweep(equal_twin, [1e-2], trials=3, seed=5).records
    np.testing.assert_allclose(half["B"], 0.5 * full["B"], rtol=1e-9)
    np.testing.assert_allclose(half["err_L2K"], 0.5 * full["err_L2K"], rtol=1e-6)


def test_noise_effect_is_mesh_independent(fine_space, finest_space):
    curves = [
        stability_sweep(_twin(space, 2.0, 2.0), [5e-2], trials=3, seed=11).records
        for space in (fine_space, finest_space)
    ]
    B_ratio = curves[1]["B"].to_numpy() / curves[0]["B"].to_numpy()
    err_ratio = curves[1]["err_L2K"].to_numpy() / curves[0]["err_L2K"].to_numpy()
    assert np.all((B_ratio > 0.8) & (B_ratio < 1.25))
    # the error settles at a noise-determined level instead of refining away
    assert np.all((err_ratio > 0.5) & (err_ratio < 2.0))
    assert curves[1]["err_L2K"].min() > 1e-3


def test_noise_continuation_ignores_q2(coarse_space):
    a = _twin(coarse_space, 2.0, 2.0)
    b = _twin(coarse_space, 2.0, 5.0)
    wa = a.noise_field(np.random.default_rng(3))
    wb = b.noise_field(np.random.default_rng(3))
    np.testing.assert_array_equal(wa.u.coefficients, wb.u.coefficients)
    np.testing.assert_array_equal(wa.p.coefficients, wb.p.coefficients)


def test_noise_field_has_unit_gamma_e_norm(equal_twin):
    noise = equal_twin.noise_field(np.random.default_rng(0))
    assert gamma_e_velocity_norm(noise.u) == pytest.approx(1.0, rel=5e-2)


def test_evolution_fit_matches_stationary_fit(equal_twin):
    levels = [1e-1, 1e-2, 1e-3]
    stationary = stability_sweep(equal_twin, levels, trials=3, seed=2)
    evolution = evolution_stability_sweep(
        equal_twin, levels, trials=3, seed=2, horizon_factor=20.0, n_steps=200, n_samples=5
    )
    assert evolution.fit.C == pytest.approx(stationary.fit.C, rel=0.25)


# ── Contrast-frequency sweep ───────────────────────────────────────

@pytest.fixture(scope="module")
def contrast(fine_space):
    q1 = RobinField.constant(fine_space.mesh, 2.0, alpha=1.0)
    return contrast_sweep(fine_space, q1, rigid_rotation_flux, m=0.25, frequencies=range(2, 11))


def test_contrast_sweep_free_exponent_in_log_regime(contrast):
    assert not contrast.fit.exponent_fixed
    assert 0.25 <= contrast.fit.exponent <= 1.0
    assert contrast.fixed_fit.exponent == 0.5


def test_contrast_sweep_records(contrast):
    records = contrast.records
    assert records["frequency"].tolist() == list(range(2, 11))
    assert records["B"].iloc[-1] < 0.2 * records["B"].iloc[0]
    ratio = records["err_L2K"].iloc[-1] / records["err_L2K"].iloc[0]
    assert ratio == pytest.approx(np.sqrt(2.0 / 10.0), rel=0.1)


def test_contrast_sweep_rejects_amplitude_below_alpha(coarse_space):
    q1 = RobinField.constant(coarse_space.mesh, 2.0, alpha=1.5)
    with pytest.raises(PreconditionError):
        contrast_sweep(coarse_space, q1, rigid_rotation_flux, m=0.25, amplitude=1.0)
    with pytest.raises(PreconditionError):
        contrast_sweep(coarse_space, q1, rigid_rotation_flux, m=0.25, frequencies=[3], amplitude=0.1)


# ── Log-law fit ────────────────────────────────────────────────────

@pytest.fixture
def synthetic_B():
    return np.logspace(-8, -2, 12)


def test_fit_recovers_known_constant(synthetic_B):
    err = 2.0 / np.sqrt(np.log(1.0 / synthetic_B))
    fit = fit_log_law(synthetic_B, err, exponent=0.5, c1=1.0)
    assert fit.C == pytest.approx(2.0, rel=1e-10)
    assert fit.residual < 1e-20
    assert fit.excluded == []
    assert fit.C_envelope == pytest.approx(2.0, rel=1e-10)
    assert fit.r_squared == pytest.approx(1.0, abs=1e-12)


def test_fit_excludes_records_above_c1(synthetic_B):
    err = 2.0 / np.sqrt(np.log(1.0 / synthetic_B))
    fit = fit_log_law(synthetic_B, err, exponent=0.5, c1=1e-3)
    assert fit.excluded == [10, 11]
    assert fit.n_records == 10


def test_fit_free_exponent(synthetic_B):
    err = 2.0 / np.log(10.0 / synthetic_B) ** 0.7
    fit = fit_log_law(synthetic_B, err, exponent=None, c1=10.0)
    assert fit.exponent == pytest.approx(0.7, rel=1e-8)
    assert fit.C == pytest.approx(2.0, rel=1e-8)
    assert not fit.exponent_fixed


def test_fit_optimises_c1(synthetic_B):
    err = 2.0 / np.sqrt(np.log(1.0 / synthetic_B))
    fit = fit_log_law(synthetic_B, err)
    assert fit.C1 > synthetic_B.max()
    assert fit.residual < 1e-3


def test_fit_needs_two_records():
    with pytest.raises(FitFailureError):
        fit_log_law(np.array([1e-3]), np.array([0.1]))


# ── Identifiability ────────────────────────────────────────────────

def test_distinct_coefficients_give_distinct_data(coarse_space):
    report = identifiability_experiment(coarse_space, rigid_rotation_flux, n_pairs=20, seed=1, alpha=0.5, threads=2)
    assert len(report.B_values) == 20
    assert report.all_distinct
    assert report.min_B > report.threshold
