import math

import numpy as np
import pytest

from app.core.errors import PreconditionError
from app.models.fields import RobinField
from app.services.spectral_service import (
    build_eigensystem,
    dense_reference_eigenvalues,
    eigenvalue_table,
    energy_in_eigenbasis,
    fractional_power_apply,
    isometry_check,
    lower_bound_violations,
    operator_norm_envelope,
    scalar_envelope,
    semigroup_apply,
)


@pytest.fixture(scope="module")
def eigensystem(coarse_space, q_two):
    return build_eigensystem(coarse_space, q_two, count=10)


def test_shift_invert_matches_dense_oracle(eigensystem, coarse_space, q_two):
    dense = dense_reference_eigenvalues(coarse_space, q_two, 5)
    assert np.allclose(eigensystem.eigenvalues[:5], dense, rtol=1e-7, atol=0.0)


def test_eigenpairs_are_orthonormal(eigensystem):
    assert eigensystem.orthonormality_error <= 1e-8
    assert eigensystem.rayleigh_error <= 1e-8
    assert np.all(np.diff(eigensystem.eigenvalues) >= 0.0)
    assert eigensystem.eigenvalues[0] > 0.0


def test_mu_equals_lambda1_for_constant_alpha(eigensystem):
    assert eigensystem.mu == eigensystem.eigenvalues[0]


def test_lambda1_is_monotone_in_q(coarse_space, eigensystem):
    larger = RobinField.constant(coarse_space.mesh, 3.0, alpha=2.0)
    es = build_eigensystem(coarse_space, larger, count=1, compute_mu=False)
    assert es.eigenvalues[0] >= eigensystem.eigenvalues[0]


def test_random_coefficients_respect_the_lower_bound(coarse_space):
    rng = np.random.default_rng(3)
    template = RobinField.constant(coarse_space.mesh, 1.0)
    qs = [template.with_values(1.0 + rng.random(len(template.nodes))) for _ in range(3)]
    assert lower_bound_violations(coarse_space, qs, alpha=1.0) == 0


def test_semigroup_on_first_mode(eigensystem):
    phi = eigensystem.eigenfield(0)
    lam = eigensystem.eigenvalues[0]
    for t in (0.0, 0.3, 2.0):
        out = semigroup_apply(eigensystem, phi, t)
        assert np.allclose(out.coefficients, math.exp(-lam * t) * phi.coefficients, atol=1e-10)


def test_semigroup_contracts_at_rate_mu(eigensystem):
    rng = np.random.default_rng(0)
    f = eigensystem.expand(rng.standard_normal(eigensystem.count))
    assert np.allclose(semigroup_apply(eigensystem, f, 0.0).coefficients, f.coefficients, atol=1e-10)
    norm = eigensystem.l2_norm(f)
    for t in (0.1, 1.0, 10.0):
        decayed = eigensystem.l2_norm(semigroup_apply(eigensystem, f, t))
        assert decayed <= math.exp(-eigensystem.mu * t) * norm * (1.0 + 1e-10)


def test_fractional_powers(eigensystem):
    phi = eigensystem.eigenfield(0)
    lam = eigensystem.eigenvalues[0]
    t = 0.5
    zero = fractional_power_apply(eigensystem, phi, t, 0.0)
    assert np.allclose(zero.coefficients, semigroup_apply(eigensystem, phi, t).coefficients, atol=1e-12)
    one = fractional_power_apply(eigensystem, phi, t, 1.0)
    assert np.allclose(one.coefficients, lam * math.exp(-lam * t) * phi.coefficients, atol=1e-10)
    with pytest.raises(PreconditionError):
        fractional_power_apply(eigensystem, phi, 0.0, 1.5)


def test_operator_norm_stays_below_envelope(eigensystem):
    for t in (0.05, 0.5, 1.0, 5.0):
        assert operator_norm_envelope(eigensystem, t, 1.5) <= scalar_envelope(t, 1.5, eigensystem.mu)


def test_isometry_and_parseval(eigensystem):
    report = isometry_check(eigensystem)
    assert report.max_relative_deviation <= 1e-8

    c = np.zeros(eigensystem.count)
    c[:3] = [0.7, -1.1, 0.4]
    w = eigensystem.expand(c).coefficients
    form = float(w @ (eigensystem.stiffness @ w))
    assert form == pytest.approx(energy_in_eigenbasis(eigensystem, c), rel=1e-8)
    assert float((2 * w) @ (eigensystem.stiffness @ (2 * w))) == pytest.approx(4.0 * form, rel=1e-12)


def test_eigenvalue_table(eigensystem):
    table = eigenvalue_table(eigensystem)
    assert list(table.columns) == ["l", "lambda"]
    assert table["l"].tolist() == list(range(1, eigensystem.count + 1))


def test_count_must_be_positive(coarse_space, q_two):
    with pytest.raises(PreconditionError):
        build_eigensystem(coarse_space, q_two, count=0)
