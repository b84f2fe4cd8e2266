import math

import numpy as np
import pytest

from app.core.errors import PreconditionError
from app.core.quadrature import annulus_rule
from app.models.geometry import BoundaryTag
from app.services import assembly_service as fem
from app.services.analytic_fields import analytic_suite, zero_field
from app.services.carleman_service import (
    bound_objective,
    build_weights,
    carleman_functionals,
    carleman_sweep,
    theoretical_bound,
    trace_quantities,
)
from tests.conftest import R0, R1


@pytest.fixture(scope="module")
def rule():
    return annulus_rule(R0, R1)


@pytest.fixture(scope="module")
def suite():
    return analytic_suite()


@pytest.fixture(scope="module")
def weight(fine_space):
    return build_weights(fine_space, lam=2.0, s=1.0, chi=1.0)


# ── Weights ────────────────────────────────────────────────────────

def test_weight_constants_match_radial_solution(weight):
    assert weight.k == 1.0
    assert weight.radial is not None
    closed = 1.0 / (R0 * math.log(R1 / R0))
    assert weight.radial.theta == pytest.approx(closed)
    assert weight.theta == pytest.approx(closed, rel=0.1)


def test_theta_converges_to_closed_form(finest_space):
    closed = 1.0 / (R0 * math.log(R1 / R0))
    fine = build_weights(finest_space, lam=2.0, s=1.0, chi=1.0)
    assert fine.theta == pytest.approx(closed, rel=0.02)


def test_psi0_matches_log_profile(weight):
    exact = lambda pts: np.log(np.hypot(pts[:, 0], pts[:, 1]) / R0) / math.log(R1 / R0)
    assert fem.l2_error(weight.psi0, exact) < 1e-2
    gamma0 = weight.space.boundary_nodes(BoundaryTag.GAMMA_0)
    assert np.all(weight.psi0.coefficients[gamma0] == 0.0)


def test_psi1_is_negative_inside(weight):
    ev = fem.evaluate_cells(weight.psi1)
    assert np.all(ev.values < 0.0)
    pts = ev.points.reshape(-1, 2)
    closed = weight.radial.psi1(np.hypot(pts[:, 0], pts[:, 1]))
    assert np.max(np.abs(ev.values.ravel() - closed)) < 1e-2


@pytest.mark.parametrize("kwargs", [{"lam": 1.5}, {"s": 0.0}, {"chi": 0.0}, {"chi": -1.0}])
def test_build_weights_rejects_bad_parameters(fine_space, kwargs):
    with pytest.raises(PreconditionError):
        build_weights(fine_space, **kwargs)


# ── Weighted inequality ────────────────────────────────────────────

def test_zero_field_gives_zero_functionals(weight, rule):
    lhs, rhs = carleman_functionals(weight, zero_field(2), rule)
    assert lhs == 0.0 and rhs == 0.0


def test_constant_field_margin_matches_divergence_identity(weight, rule, suite):
    u = suite["constant"]
    lhs, rhs = carleman_functionals(weight, u, rule)
    psi, grad, _ = weight.radial.evaluate(rule.points)
    c2 = float(np.sum(u.value(rule.points[:1]) ** 2))
    expected = float(np.dot(rule.weights, np.sum(grad ** 2, axis=1) * c2 * np.exp(psi)))
    assert rhs - lhs == pytest.approx(expected, rel=1e-6)
    assert rhs - lhs > 0.0


def test_sweep_has_no_violations_for_large_s(fine_space, rule, suite):
    table = carleman_sweep(fine_space, [2.0, 4.0], [4.0, 8.0], suite, rule=rule)
    assert len(table) == 16
    assert not table["violation"].any()


def test_sweep_rigid_fields_hold_on_full_grid(fine_space, rule, suite):
    fields = {name: suite[name] for name in ("constant", "rigid_rotation")}
    table = carleman_sweep(fine_space, [2.0, 4.0], [1.0, 2.0, 4.0, 8.0], fields, threads=2, rule=rule)
    assert not table["violation"].any()
    for (_, _), group in table.groupby(["field_id", "lambda"]):
        margins = group.sort_values("s")["margin"].to_numpy()
        assert np.all(np.diff(margins) > 0.0)


def test_sweep_is_independent_of_thread_count(fine_space, rule, suite):
    fields = {"rigid_rotation": suite["rigid_rotation"]}
    serial = carleman_sweep(fine_space, [2.0], [1.0, 2.0], fields, threads=1, rule=rule)
    threaded = carleman_sweep(fine_space, [2.0], [1.0, 2.0], fields, threads=3, rule=rule)
    assert serial.equals(threaded)


# ── Trace quantities and bound ─────────────────────────────────────

def test_rigid_rotation_boundary_quantity(rule, suite):
    tq = trace_quantities(suite["rigid_rotation"], zero_field(1), rule)
    assert tq.B == pytest.approx(2.0 * math.sqrt(2.0 * math.pi), rel=1e-6)
    assert tq.A > 0.0
    assert not tq.surrogate


def test_trace_quantities_scale_linearly(rule, suite):
    u = suite["trigonometric"]
    base = trace_quantities(u, zero_field(1), rule)
    scaled = trace_quantities(u.scaled(3.0), zero_field(1), rule)
    assert scaled.A == pytest.approx(3.0 * base.A, rel=1e-10)
    assert scaled.B == pytest.approx(3.0 * base.B, rel=1e-10)


def test_discrete_trace_quantities_are_flagged(rigid_solution):
    tq = trace_quantities(rigid_solution.u, rigid_solution.p)
    assert tq.surrogate
    assert tq.A > 0.0 and tq.B > 0.0


def test_bound_minimises_objective():
    report = theoretical_bound(2.0, 1e-3, 1.0, 10.0)
    grid = np.linspace(1e-3, 20.0, 1000)
    assert np.min(bound_objective(2.0, 1e-3, 1.0, 10.0, grid)) >= report.value - 1e-9
    assert report.value == pytest.approx(float(bound_objective(2.0, 1e-3, 1.0, 10.0, np.array([report.s_star]))[0]))


def test_bound_increases_with_B():
    assert theoretical_bound(1.0, 2e-4, 1.0).value > theoretical_bound(1.0, 1e-4, 1.0).value


def test_bound_decays_logarithmically():
    Bs = [10.0 ** -e for e in range(2, 13, 2)]
    values = [theoretical_bound(1.0, B, 1.0, 1.0).value for B in Bs]
    assert all(b < a for a, b in zip(values, values[1:]))
    scaled = [v * math.log(1.0 / B) for v, B in zip(values, Bs)]
    assert max(scaled) < 10.0


@pytest.mark.parametrize("A, B, k, dtilde", [(0.0, 1.0, 1.0, 1.0), (1.0, 0.0, 1.0, 1.0), (1.0, 1.0, 0.0, 1.0), (1.0, 1.0, 1.0, 0.5)])
def test_bound_rejects_bad_arguments(A, B, k, dtilde):
    with pytest.raises(PreconditionError):
        theoretical_bound(A, B, k, dtilde)
