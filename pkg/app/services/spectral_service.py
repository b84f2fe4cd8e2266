"""
Eigensystem of the discrete Stokes operator A_q on discretely divergence-free fields.

Shift-invert ARPACK iterations run through the saddle-point solve, so every
Krylov vector satisfies the divergence constraint. A Rayleigh-Ritz pass on
the returned basis restores M-orthonormality to rounding level.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
import pandas as pd
import scipy.linalg
from scipy.sparse.linalg import ArpackNoConvergence, LinearOperator, eigsh

from app.core.errors import EigenConvergenceError, PreconditionError
from app.models.fields import DiscreteField, DofSpace, FieldKind, RobinField
from app.models.reports import IsometryReport
from app.services import assembly_service as fem
from app.services.stationary_service import factorize_stationary

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class EigenSystem:
    space: DofSpace
    q: RobinField
    eigenvalues: np.ndarray     # (L,) nondecreasing
    vectors: np.ndarray         # (n_velocity, L), M-orthonormal
    pressures: np.ndarray       # (n_pressure, L) multipliers of each eigenfield
    mu: float
    stiffness: object           # A + R(q)
    mass: object
    orthonormality_error: float
    rayleigh_error: float

    @property
    def count(self) -> int:
        return len(self.eigenvalues)

    def eigenfield(self, l: int) -> DiscreteField:
        return DiscreteField(self.space, FieldKind.VELOCITY, self.vectors[:, l])

    def coefficients(self, f: DiscreteField) -> np.ndarray:
        """(phi_l, f)_L2 for every computed mode."""
        return self.vectors.T @ (self.mass @ f.coefficients)

    def expand(self, coefficients: np.ndarray) -> DiscreteField:
        return DiscreteField(self.space, FieldKind.VELOCITY, self.vectors @ coefficients)

    def l2_norm(self, f: DiscreteField) -> float:
        c = f.coefficients
        return float(np.sqrt(max(c @ (self.mass @ c), 0.0)))

    def projection_residual(self, f: DiscreteField) -> float:
        """||f - P_L f||_L2 / ||f||_L2 (0 for f = 0)."""
        norm = self.l2_norm(f)
        if norm == 0.0:
            return 0.0
        rest = f - self.expand(self.coefficients(f))
        return self.l2_norm(rest) / norm


# ── Construction ───────────────────────────────────────────────────

def _shift_invert_pairs(space: DofSpace, q: RobinField, count: int, sigma: float, tol: float):
    fact = factorize_stationary(space, q, mass_shift=-sigma) if sigma else factorize_stationary(space, q)
    K = fact.operator
    M = fem.assemble_velocity_mass(space)
    n_vel = space.velocity_dof_count
    n_pres = space.pressure_dof_count
    zeros = np.zeros(n_pres)

    def opinv(b):
        x, _, _ = fact.solve_system(np.concatenate([np.ravel(b), zeros]), tol=1e-8)
        return x[:n_vel]

    op = LinearOperator((n_vel, n_vel), matvec=opinv, dtype=float)
    rng = np.random.default_rng(0)
    v0 = opinv(M @ rng.standard_normal(n_vel))

    try:
        vals, vecs = eigsh(K, k=count, M=M, sigma=sigma, which="LM", OPinv=op, v0=v0, tol=tol)
    except ArpackNoConvergence as e:
        logger.error(f"ARPACK did not converge: {len(e.eigenvalues)} of {count} eigenpairs")
        raise EigenConvergenceError(
            f"eigen-iteration converged for only {len(e.eigenvalues)} of {count} pairs",
            residuals=list(np.asarray(e.eigenvalues, dtype=float)),
        ) from e

    # Rayleigh-Ritz cleanup on the constrained subspace
    Kr = vecs.T @ (K @ vecs)
    Mr = vecs.T @ (M @ vecs)
    Kr = 0.5 * (Kr + Kr.T)
    Mr = 0.5 * (Mr + Mr.T)
    lam, Y = scipy.linalg.eigh(Kr, Mr)
    X = vecs @ Y
    return lam, X, K, M, fact


def build_eigensystem(
    space: DofSpace,
    q: RobinField,
    count: int = 30,
    sigma: float = 0.0,
    tol: float = 0.0,
    compute_mu: bool = True,
) -> EigenSystem:
    if count < 1:
        raise PreconditionError(f"eigenpair count must be >= 1, got {count}")
    q.check_lower_bound()
    available = space.velocity_dof_count - space.pressure_dof_count - 1
    if count > available:
        logger.warning(f"Requested {count} eigenpairs, only {available} available; clamping")
        count = available

    lam, X, K, M, fact = _shift_invert_pairs(space, q, count, sigma, tol)

    # pressure multiplier pi_l from K phi - D^T pi = lam M phi
    pressures = np.empty((space.pressure_dof_count, len(lam)))
    n_vel = space.velocity_dof_count
    zeros = np.zeros(space.pressure_dof_count)
    for l in range(len(lam)):
        rhs = np.concatenate([(lam[l] - sigma) * (M @ X[:, l]), zeros])
        x, _, _ = fact.solve_system(rhs, tol=1e-8)
        pressures[:, l] = x[n_vel:]

    gram = X.T @ (M @ X)
    orth = float(np.max(np.abs(gram - np.eye(len(lam)))))
    ray = X.T @ (K @ X)
    rayleigh = float(np.max(np.abs(ray - np.diag(lam))) / max(float(np.max(np.abs(lam))), 1e-300))

    if not compute_mu or q.is_constant(q.alpha):
        mu = float(lam[0])
    else:
        alpha_field = RobinField.constant(space.mesh, q.alpha)
        mu = float(_shift_invert_pairs(space, alpha_field, 1, sigma, tol)[0][0])

    logger.info(
        f"Eigensystem: {len(lam)} pairs, lambda_1={lam[0]:.8g}, mu={mu:.8g}, "
        f"orthonormality {orth:.1e}, Rayleigh {rayleigh:.1e}"
    )
    return EigenSystem(
        space=space,
        q=q,
        eigenvalues=lam,
        vectors=X,
        pressures=pressures,
        mu=mu,
        stiffness=K,
        mass=M,
        orthonormality_error=orth,
        rayleigh_error=rayleigh,
    )


def dense_reference_eigenvalues(space: DofSpace, q: RobinField, count: int) -> np.ndarray:
    """Dense oracle: generalized eigenproblem restricted to the null space of D."""
    K = (fem.assemble_stiffness(space) + fem.assemble_robin_mass(space, q)).toarray()
    M = fem.assemble_velocity_mass(space).toarray()
    D = fem.assemble_divergence(space).toarray()
    Z = scipy.linalg.null_space(D)
    Kz = Z.T @ K @ Z
    Mz = Z.T @ M @ Z
    return scipy.linalg.eigh(0.5 * (Kz + Kz.T), 0.5 * (Mz + Mz.T), eigvals_only=True, subset_by_index=[0, count - 1])


# ── Semigroup and fractional powers ────────────────────────────────

def semigroup_apply(es: EigenSystem, f: DiscreteField, t: float) -> DiscreteField:
    """Truncated expansion of exp(-t A_q) f."""
    if t < 0.0:
        raise PreconditionError(f"semigroup time must be >= 0, got {t}")
    c = es.coefficients(f)
    return es.expand(np.exp(-t * es.eigenvalues) * c)


def fractional_power_apply(es: EigenSystem, f: DiscreteField, t: float, eta: float) -> DiscreteField:
    """Truncated expansion of A_q^eta exp(-t A_q) f."""
    if eta < 0.0:
        raise PreconditionError(f"fractional power must be >= 0, got {eta}")
    if t < 0.0 or (eta > 0.0 and t == 0.0):
        raise PreconditionError(f"A^eta exp(-tA) needs t > 0 when eta > 0 (t={t}, eta={eta})")
    c = es.coefficients(f)
    return es.expand(es.eigenvalues ** eta * np.exp(-t * es.eigenvalues) * c)


def operator_norm_envelope(es: EigenSystem, t: float, eta: float) -> float:
    """max_l lambda_l^eta exp(-t lambda_l): the operator norm on the computed span."""
    return float(np.max(es.eigenvalues ** eta * np.exp(-t * es.eigenvalues)))


def scalar_envelope(t: float, eta: float, mu: float, delta: float = 0.5) -> float:
    """Bound sup_{x >= mu} x^eta e^{-tx} <= (eta / (e delta t))^eta e^{-(1-delta) mu t}."""
    if eta == 0.0:
        return float(np.exp(-(1.0 - delta) * mu * t))
    return float((eta / (np.e * delta * t)) ** eta * np.exp(-(1.0 - delta) * mu * t))


def isometry_check(es: EigenSystem) -> IsometryReport:
    """Compare a_q(phi, phi) with ||A^(1/2) phi||^2 = lambda ||phi||^2 for each mode."""
    deviations: List[float] = []
    for l in range(es.count):
        phi = es.vectors[:, l]
        form = float(phi @ (es.stiffness @ phi))
        half = es.eigenvalues[l] * float(phi @ (es.mass @ phi))
        deviations.append(abs(form - half) / es.eigenvalues[l])
    return IsometryReport(max_relative_deviation=max(deviations), deviations=deviations)


def energy_in_eigenbasis(es: EigenSystem, coefficients: np.ndarray) -> float:
    return float(np.sum(es.eigenvalues * coefficients ** 2))


def eigenvalue_table(es: EigenSystem) -> pd.DataFrame:
    return pd.DataFrame({"l": np.arange(1, es.count + 1), "lambda": es.eigenvalues})


def lower_bound_violations(space: DofSpace, qs: List[RobinField], mu: Optional[float] = None, alpha: Optional[float] = None) -> int:
    """Count coefficients whose lambda_1 falls below mu = lambda_1 of the constant-alpha operator."""
    if mu is None:
        alpha = alpha if alpha is not None else qs[0].alpha
        mu = build_eigensystem(space, RobinField.constant(space.mesh, alpha), count=1, compute_mu=False).eigenvalues[0]
    bad = 0
    for q in qs:
        lam1 = build_eigensystem(space, q, count=1, compute_mu=False).eigenvalues[0]
        if lam1 < mu * (1.0 - 1e-10):
            bad += 1
    return bad
