"""
Carleman weights Psi = Psi1 + s Psi0 on the annulus and numerical checks of
the weighted inequality on analytic test fields.

Psi0 is harmonic with trace chi on Γe and 0 on Γ0; Psi1 solves
Laplace(Psi1) = lambda with zero trace. Both are computed as P2 fields;
for constant chi the closed-form radial solutions are attached as well
and used for exact-annulus quadrature.
"""

import math
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.optimize import brentq

from app.core.errors import CarlemanSignError, PreconditionError
from app.core.quadrature import AnnulusRule, annulus_rule
from app.models.fields import DiscreteField, DofSpace, FieldKind, PointFunction
from app.models.geometry import BoundaryTag
from app.models.reports import BoundReport, TraceQuantities, WeightConstants
from app.services import assembly_service as fem
from app.services.analytic_fields import AnalyticField
from app.services.evolution_service import lifting_solve
from app.services.measurement_service import extract_measurement

logger = logging.getLogger(__name__)


# ── Weights ────────────────────────────────────────────────────────

@dataclass(frozen=True)
class RadialWeight:
    """Closed-form Psi0 = chi ln(r/R0)/ln(R1/R0) and Psi1 = lam/4 (r^2 - c1 ln r - c2)."""
    R0: float
    R1: float
    lam: float
    s: float
    chi: float

    @property
    def log_ratio(self) -> float:
        return math.log(self.R1 / self.R0)

    @property
    def c1(self) -> float:
        return (self.R1 ** 2 - self.R0 ** 2) / self.log_ratio

    @property
    def c2(self) -> float:
        return self.R0 ** 2 - self.c1 * math.log(self.R0)

    def psi0(self, r: np.ndarray) -> np.ndarray:
        return self.chi * np.log(r / self.R0) / self.log_ratio

    def psi1(self, r: np.ndarray) -> np.ndarray:
        return 0.25 * self.lam * (r ** 2 - self.c1 * np.log(r) - self.c2)

    def dpsi_dr(self, r: np.ndarray) -> np.ndarray:
        return 0.25 * self.lam * (2.0 * r - self.c1 / r) + self.s * self.chi / (r * self.log_ratio)

    def evaluate(self, points: np.ndarray):
        """Composite Psi, its gradient and Laplacian at points."""
        r = np.hypot(points[:, 0], points[:, 1])
        psi = self.psi1(r) + self.s * self.psi0(r)
        grad = (self.dpsi_dr(r) / r)[:, None] * points
        return psi, grad, np.full(len(r), self.lam)

    @property
    def theta(self) -> float:
        return self.chi / (self.R0 * self.log_ratio)


@dataclass(eq=False)
class CarlemanWeight:
    psi0: DiscreteField
    psi1: DiscreteField
    lam: float
    s: float
    k: float
    theta: float
    radial: Optional[RadialWeight] = None

    @property
    def space(self) -> DofSpace:
        return self.psi0.space

    @property
    def composite(self) -> DiscreteField:
        return self.psi1 + self.s * self.psi0

    def constants(self) -> WeightConstants:
        return WeightConstants(
            lam=self.lam,
            s=self.s,
            k=self.k,
            theta=self.theta,
            radial=self.radial is not None,
            theta_closed_form=self.radial.theta if self.radial is not None else None,
        )


def _sign_failure(message: str, points: np.ndarray, mask: np.ndarray):
    bad = points[np.flatnonzero(mask)[0]]
    raise CarlemanSignError(f"{message} at ({bad[0]:.6g}, {bad[1]:.6g}); mesh may be too coarse")


def check_weight_signs(weight: CarlemanWeight) -> CarlemanWeight:
    space = weight.space
    ev0 = fem.evaluate_cells(weight.psi0)
    ev1 = fem.evaluate_cells(weight.psi1)
    pts = ev0.points.reshape(-1, 2)

    if np.any(ev0.values.ravel() <= 0.0):
        _sign_failure("Psi0 is not positive inside", pts, ev0.values.ravel() <= 0.0)
    gamma0 = space.boundary_nodes(BoundaryTag.GAMMA_0)
    if np.any(weight.psi0.coefficients[gamma0] != 0.0):
        raise CarlemanSignError("Psi0 does not vanish on Γ0 nodes")
    if np.any(weight.psi0.coefficients[space.boundary_nodes(BoundaryTag.GAMMA_E)] < 0.0):
        raise CarlemanSignError("Psi0 is negative on Γe")
    tr0 = fem.boundary_traces(weight.psi0, BoundaryTag.GAMMA_0)
    dn0 = tr0.normal_derivative
    if np.any(dn0 >= 0.0):
        _sign_failure("normal derivative of Psi0 is not negative on Γ0", tr0.points, dn0 >= 0.0)

    if np.any(ev1.values.ravel() >= 0.0):
        _sign_failure("Psi1 is not negative inside", pts, ev1.values.ravel() >= 0.0)
    for tag in (BoundaryTag.GAMMA_E, BoundaryTag.GAMMA_0):
        tr1 = fem.boundary_traces(weight.psi1, tag)
        dn1 = tr1.normal_derivative
        if np.any(dn1 <= 0.0):
            _sign_failure(f"normal derivative of Psi1 is not positive on {tag.name}", tr1.points, dn1 <= 0.0)
    return weight


def build_weights(
    space: DofSpace,
    lam: float = 2.0,
    s: float = 1.0,
    chi: Union[float, PointFunction] = 1.0,
    check: bool = True,
) -> CarlemanWeight:
    if lam < 2.0:
        raise PreconditionError(f"lambda must be >= 2, got {lam}")
    if not s > 0.0:
        raise PreconditionError(f"s must be positive, got {s}")

    gamma_e = space.boundary_nodes(BoundaryTag.GAMMA_E)
    coords = space.node_coordinates[gamma_e]
    chi_values = np.broadcast_to(
        np.asarray(chi(coords) if callable(chi) else float(chi), dtype=float), (len(gamma_e),)
    )
    if np.any(chi_values < 0.0):
        raise PreconditionError("chi must be nonnegative on Γe")
    if not np.any(chi_values > 0.0):
        raise PreconditionError("chi must not vanish identically on Γe")

    psi0 = lifting_solve(space, chi)
    psi1 = fem.solve_scalar_dirichlet(space, lam, {BoundaryTag.GAMMA_E: 0.0, BoundaryTag.GAMMA_0: 0.0})
    k = float(np.max(psi0.coefficients[gamma_e]))
    theta = float(np.min(np.abs(fem.boundary_traces(psi0, BoundaryTag.GAMMA_0).normal_derivative)))

    mesh = space.mesh
    radial = None
    if np.all(chi_values == chi_values[0]):
        radial = RadialWeight(mesh.R0, mesh.R1, lam, s, float(chi_values[0]))

    weight = CarlemanWeight(psi0=psi0, psi1=psi1, lam=lam, s=s, k=k, theta=theta, radial=radial)
    if check:
        check_weight_signs(weight)
    logger.info(f"Carleman weight lambda={lam:g} s={s:g}: k={k:.6g}, theta={theta:.6g}, radial={radial is not None}")
    return weight


# ── Carleman functionals ───────────────────────────────────────────

def _integrands(u: AnalyticField, points, weights, psi, lap_psi):
    val = u.value(points)
    grad = u.gradient(points)
    lap = u.laplacian(points)
    e = np.exp(psi)
    u2 = np.sum(val ** 2, axis=1)
    g2 = np.sum(grad ** 2, axis=(1, 2))
    lhs = float(np.dot(weights, (lap_psi * u2 + (lap_psi - 1.0) * g2) * e))
    rhs = float(np.dot(weights, np.sum(lap ** 2, axis=1) * e))
    return lhs, rhs


def _boundary_term(u: AnalyticField, points, weights, normals, psi, grad_psi) -> float:
    tangents = np.column_stack([-normals[:, 1], normals[:, 0]])
    dn_psi = np.einsum("ni,ni->n", grad_psi, normals)
    val = u.value(points)
    grad = u.gradient(points)
    dtau = np.einsum("ni,ni->n", u.grad_sq_gradient(points), tangents)
    body = np.sum(val ** 2, axis=1) + np.sum(grad ** 2, axis=(1, 2)) + 2.0 * np.abs(dtau)
    return float(np.dot(weights, dn_psi * body * np.exp(psi)))


def carleman_functionals(
    weight: CarlemanWeight,
    u: AnalyticField,
    rule: Optional[AnnulusRule] = None,
) -> Tuple[float, float]:
    """(lhs, rhs) of the weighted inequality for an analytic field."""
    if weight.radial is not None:
        rad = weight.radial
        rule = rule or annulus_rule(rad.R0, rad.R1)
        psi, grad, lap = rad.evaluate(rule.points)
        lhs, rhs = _integrands(u, rule.points, rule.weights, psi, lap)
        bpsi, bgrad, _ = rad.evaluate(rule.boundary_points)
        rhs += _boundary_term(u, rule.boundary_points, rule.boundary_weights, rule.boundary_normals, bpsi, bgrad)
        return lhs, rhs

    # non-radial weight: discrete Psi on mesh quadrature, elementwise Laplacian
    composite = weight.composite
    ev = fem.evaluate_cells(composite, with_hessians=True)
    T, nq = ev.values.shape
    lap = np.repeat(np.trace(ev.hessians, axis1=1, axis2=2), nq)
    lhs, rhs = _integrands(
        u, ev.points.reshape(-1, 2), ev.weights.ravel(), ev.values.ravel(), lap
    )
    for tag in (BoundaryTag.GAMMA_E, BoundaryTag.GAMMA_0):
        tr = fem.boundary_traces(composite, tag)
        rhs += _boundary_term(u, tr.points, tr.weights, tr.normals, tr.values, tr.gradients)
    return lhs, rhs


def violations(lhs, rhs):
    """rhs - lhs below -1e-8 (|lhs| + |rhs|); works elementwise on arrays and Series."""
    return rhs - lhs < -1e-8 * (abs(lhs) + abs(rhs))


def carleman_sweep(
    space: DofSpace,
    lambdas: Sequence[float],
    s_values: Sequence[float],
    fields: Dict[str, AnalyticField],
    chi: Union[float, PointFunction] = 1.0,
    threads: int = 1,
    rule: Optional[AnnulusRule] = None,
) -> pd.DataFrame:
    rule = rule or annulus_rule(space.mesh.R0, space.mesh.R1)
    grid = [(lam, s) for lam in lambdas for s in s_values]

    def run(cell):
        lam, s = cell
        weight = build_weights(space, lam, s, chi)
        rows = []
        for name, u in fields.items():
            lhs, rhs = carleman_functionals(weight, u, rule)
            rows.append({
                "field_id": name,
                "lambda": lam,
                "s": s,
                "lhs": lhs,
                "rhs": rhs,
                "margin": rhs - lhs,
                "violation": bool(violations(lhs, rhs)),
            })
        return rows

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(run, grid))
    df = pd.DataFrame([row for rows in results for row in rows])
    n_bad = int(df["violation"].sum())
    if n_bad:
        logger.warning(f"Carleman sweep: {n_bad} violations")
    return df


# ── Trace quantities and the s-optimised bound ─────────────────────

def trace_quantities(u, p, rule: Optional[AnnulusRule] = None) -> TraceQuantities:
    """A (H3 content) and B (Γe data) for analytic or discrete pairs.

    For discrete fields A is the surrogate ||u||_H2(broken) + ||p||_H1.
    """
    if isinstance(u, AnalyticField):
        if rule is None:
            raise PreconditionError("analytic trace quantities need an annulus quadrature rule")
        A = u.sobolev_norm(rule, 3) + p.sobolev_norm(rule, 3)
        pts, w, n = rule.outer_points, rule.outer_weights, rule.outer_normals

        def l2(values):
            return float(np.sqrt(np.dot(w, np.sum(values ** 2, axis=1))))

        B = (
            l2(u.value(pts))
            + l2(p.value(pts))
            + l2(np.einsum("nij,nj->ni", u.gradient(pts), n))
            + l2(np.einsum("nij,nj->ni", p.gradient(pts), n))
        )
        return TraceQuantities(A=A, B=B, surrogate=False)

    if u.kind != FieldKind.VELOCITY or p.kind != FieldKind.PRESSURE:
        raise PreconditionError("discrete trace quantities need a velocity and a pressure field")
    A = fem.broken_h2_norm(u) + fem.h1_norm(p)
    B = extract_measurement(u, p).B
    return TraceQuantities(A=A, B=B, surrogate=True)


def theoretical_bound(A: float, B: float, k: float, dtilde: float = 10.0) -> BoundReport:
    """min over s > 0 of e^(ks) sqrt(B) + dtilde sqrt(A) / s."""
    if not A > 0.0 or not B > 0.0:
        raise PreconditionError(f"A and B must be positive, got A={A}, B={B}")
    if not k > 0.0:
        raise PreconditionError(f"k must be positive, got {k}")
    if dtilde < 1.0:
        raise PreconditionError(f"dtilde must be >= 1, got {dtilde}")
    sa, sb = dtilde * math.sqrt(A), math.sqrt(B)

    def stationarity(s):
        return k * s * s * math.exp(k * s) * sb - sa

    hi = 1.0
    while stationarity(hi) <= 0.0:
        hi *= 2.0
    s_star = brentq(stationarity, 0.0, hi, xtol=1e-15, rtol=1e-14, maxiter=500)
    value = math.exp(k * s_star) * sb + sa / s_star
    ratio = sa / (k * sb)
    asymptotic = sa * (k + 2.0) / math.log(ratio) if ratio > 1.0 else math.nan
    return BoundReport(s_star=s_star, value=value, asymptotic=asymptotic)


def bound_objective(A: float, B: float, k: float, dtilde: float, s: np.ndarray) -> np.ndarray:
    return np.exp(k * s) * math.sqrt(B) + dtilde * math.sqrt(A) / s
