"""
Stationary Stokes solver with Neumann data on Γe and Robin condition on Γ0.

The saddle-point system

    [ K   -D^T ] [u]   [b]
    [ -D   0   ] [p] = [0],    K = A + R(q),

is factorized once with SuperLU and reused for every right-hand side.
"""

import math
import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
import pandas as pd
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from app.core.errors import (
    EnergyIdentityError,
    PreconditionError,
    RobinBoundError,
    SingularSystemError,
    SolverConvergenceError,
)
from app.models.fields import (
    BoundaryFunction,
    DiscreteField,
    DofSpace,
    FieldKind,
    PointFunction,
    RobinField,
)
from app.models.geometry import BoundaryTag
from app.models.reports import EnergyEstimateReport
from app.services import assembly_service as fem

logger = logging.getLogger(__name__)


# ── Problem and solution containers ────────────────────────────────

@dataclass
class StationaryProblem:
    space: DofSpace
    q: RobinField
    g: Optional[BoundaryFunction] = None
    f: Optional[PointFunction] = None
    rho0: Optional[BoundaryFunction] = None

    @property
    def mesh(self):
        return self.space.mesh

    def load_vector(self) -> np.ndarray:
        return (
            fem.assemble_neumann_load(self.space, self.g)
            + fem.assemble_body_load(self.space, self.f)
            + fem.assemble_boundary_load(self.space, self.rho0, BoundaryTag.GAMMA_0)
        )


@dataclass
class StationarySolution:
    u: DiscreteField
    p: DiscreteField
    residual_norm: float
    relative_residual: float
    energy: float
    load_pairing: float
    problem: Optional[StationaryProblem] = field(default=None, repr=False)

    @property
    def space(self) -> DofSpace:
        return self.u.space

    @property
    def energy_defect(self) -> float:
        return energy_identity_defect(self.energy, self.load_pairing)


def saddle_point_matrix(K: sp.spmatrix, D: sp.spmatrix) -> sp.csc_matrix:
    return sp.bmat([[K, -D.T], [-D, None]], format="csc")


# ── Factorization ──────────────────────────────────────────────────

class StationaryFactorization:
    """LU of [K + shift*M, -D^T; -D, 0] for repeated solves.

    SuperLU objects are not documented as thread-safe, so solves are serialised.
    """

    def __init__(self, space: DofSpace, q: RobinField, mass_shift: float = 0.0):
        try:
            q.check_lower_bound()
        except RobinBoundError as e:
            raise SingularSystemError(f"coercivity lost: {e}") from e
        self.space = space
        self.q = q
        self.mass_shift = mass_shift
        self.stiffness = fem.assemble_stiffness(space)
        self.robin = fem.assemble_robin_mass(space, q)
        self.operator = (self.stiffness + self.robin).tocsr()
        self.divergence = fem.assemble_divergence(space)
        self.mass = fem.assemble_velocity_mass(space) if mass_shift else None
        block = self.operator if not mass_shift else (self.operator + mass_shift * self.mass).tocsr()
        self.matrix = saddle_point_matrix(block, self.divergence)
        self._lock = threading.Lock()
        try:
            self._lu = splu(self.matrix)
        except RuntimeError as e:
            logger.error(f"Saddle-point factorization failed: {e}")
            raise SingularSystemError(f"saddle-point matrix is singular: {e}") from e
        logger.debug(f"Factorized saddle-point system with {self.matrix.shape[0]} unknowns")

    @property
    def n_velocity(self) -> int:
        return self.space.velocity_dof_count

    def solve_system(self, rhs: np.ndarray, tol: float = 1e-10, refinements: int = 2):
        """Solve with iterative refinement; returns (x, absolute residual, relative residual)."""
        rhs_norm = float(np.linalg.norm(rhs))
        if rhs_norm == 0.0:
            return np.zeros_like(rhs), 0.0, 0.0
        with self._lock:
            x = self._lu.solve(rhs)
            r = rhs - self.matrix @ x
            for _ in range(refinements):
                if np.linalg.norm(r) <= tol * rhs_norm:
                    break
                x = x + self._lu.solve(r)
                r = rhs - self.matrix @ x
        res = float(np.linalg.norm(r))
        rel = res / rhs_norm
        if not np.isfinite(rel) or rel > tol:
            logger.error(f"Saddle-point solve did not reach tolerance {tol:.1e}: {rel:.3e}")
            raise SolverConvergenceError("saddle-point solve did not converge", rel)
        return x, res, rel

    def solve(self, load: np.ndarray, tol: float = 1e-10):
        """Velocity load only (zero divergence data); returns (u, p, res, rel)."""
        rhs = np.concatenate([load, np.zeros(self.space.pressure_dof_count)])
        x, res, rel = self.solve_system(rhs, tol)
        n = self.n_velocity
        return x[:n], x[n:], res, rel


def factorize_stationary(space: DofSpace, q: RobinField, mass_shift: float = 0.0) -> StationaryFactorization:
    return StationaryFactorization(space, q, mass_shift)


# ── Solvers ────────────────────────────────────────────────────────

def energy_identity_defect(energy: float, pairing: float) -> float:
    """Relative gap between a_q(u,u) and <load,u>; 0 for the zero solution."""
    scale = max(abs(energy), abs(pairing))
    return abs(energy - pairing) / scale if scale > 0.0 else 0.0


def solve_stationary(
    problem: StationaryProblem,
    tol: float = 1e-10,
    factorization: Optional[StationaryFactorization] = None,
    energy_rtol: float = 1e-6,
) -> StationarySolution:
    if not tol > 0.0:
        raise PreconditionError(f"solver tolerance must be positive, got {tol}")
    fact = factorization or factorize_stationary(problem.space, problem.q)
    load = problem.load_vector()
    u, p, res, rel = fact.solve(load, tol)

    energy = float(u @ (fact.operator @ u))
    pairing = float(load @ u)
    defect = energy_identity_defect(energy, pairing)
    if defect > energy_rtol:
        logger.error(f"Energy identity off: a_q(u,u)={energy:.12e} vs <load,u>={pairing:.12e}")
        raise EnergyIdentityError(
            f"a_q(u,u) and <load,u> differ by {defect:.3e} relative (allowed {energy_rtol:.1e})"
        )
    if defect > 1e-8:
        logger.warning(f"Energy identity gap {defect:.3e} above 1e-8")
    logger.info(f"Stationary solve: {fact.matrix.shape[0]} unknowns, relative residual {rel:.2e}")
    return StationarySolution(
        u=DiscreteField(problem.space, FieldKind.VELOCITY, u),
        p=DiscreteField(problem.space, FieldKind.PRESSURE, p),
        residual_norm=res,
        relative_residual=rel,
        energy=energy,
        load_pairing=pairing,
        problem=problem,
    )


class DirichletRobinSolver:
    """Stokes with prescribed velocity on Γe and the Robin condition on Γ0.

    Completes Γe velocity data into a full solution for a known q. With
    q=None Γ0 is traction-free (du/dn - p n = 0).
    """

    def __init__(self, space: DofSpace, q: Optional[RobinField] = None):
        K = fem.assemble_stiffness(space)
        if q is not None:
            try:
                q.check_lower_bound()
            except RobinBoundError as e:
                raise SingularSystemError(f"coercivity lost: {e}") from e
            K = K + fem.assemble_robin_mass(space, q)
        self.space = space
        self.q = q
        K = K.tocsr()
        D = fem.assemble_divergence(space).tocsr()
        self.gamma_e_nodes = space.boundary_nodes(BoundaryTag.GAMMA_E)
        self.fixed = np.concatenate([self.gamma_e_nodes, self.gamma_e_nodes + space.n_nodes])
        mask = np.ones(space.velocity_dof_count, dtype=bool)
        mask[self.fixed] = False
        self.free = np.flatnonzero(mask)
        self._K_fd = K[self.free][:, self.fixed]
        self._D_d = D[:, self.fixed]
        self.matrix = saddle_point_matrix(K[self.free][:, self.free], D[:, self.free])
        self._lock = threading.Lock()
        try:
            self._lu = splu(self.matrix)
        except RuntimeError as e:
            raise SingularSystemError(f"Dirichlet-Robin system is singular: {e}") from e

    def solve(self, gamma_e_velocity: np.ndarray, tol: float = 1e-10):
        """gamma_e_velocity: (len(gamma_e_nodes), 2) nodal values; returns (u, p) fields."""
        values = np.asarray(gamma_e_velocity, dtype=float)
        u_d = np.concatenate([values[:, 0], values[:, 1]])
        rhs = np.concatenate([-(self._K_fd @ u_d), self._D_d @ u_d])
        norm = float(np.linalg.norm(rhs))
        u = np.zeros(self.space.velocity_dof_count)
        u[self.fixed] = u_d
        if norm == 0.0:
            return (
                DiscreteField(self.space, FieldKind.VELOCITY, u),
                DiscreteField.zeros(self.space, FieldKind.PRESSURE),
            )
        with self._lock:
            x = self._lu.solve(rhs)
            r = rhs - self.matrix @ x
            if np.linalg.norm(r) > tol * norm:
                x = x + self._lu.solve(r)
                r = rhs - self.matrix @ x
        rel = float(np.linalg.norm(r)) / norm
        if rel > tol:
            raise SolverConvergenceError("Dirichlet-Robin solve did not converge", rel)
        nf = len(self.free)
        u[self.free] = x[:nf]
        return (
            DiscreteField(self.space, FieldKind.VELOCITY, u),
            DiscreteField(self.space, FieldKind.PRESSURE, x[nf:]),
        )

    def gamma_e_values(self, u: DiscreteField) -> np.ndarray:
        return u.nodal_vectors()[self.gamma_e_nodes]


def solve_dirichlet_robin(space: DofSpace, q: Optional[RobinField], gamma_e_velocity: np.ndarray, tol: float = 1e-10):
    return DirichletRobinSolver(space, q).solve(gamma_e_velocity, tol)


# ── Diagnostics ────────────────────────────────────────────────────

def normal_flux(u: DiscreteField, tag: BoundaryTag) -> float:
    tr = fem.boundary_traces(u, tag)
    return tr.integrate(np.einsum("ni,ni->n", tr.values, tr.normals))


def boundary_l2(space: DofSpace, fn: Optional[BoundaryFunction], tag: BoundaryTag) -> float:
    if fn is None:
        return 0.0
    points, weights, normals, _ = fem.boundary_quadrature(space, tag)
    values = np.asarray(fn(points, normals), dtype=float)
    return float(np.sqrt(np.dot(weights, np.sum(values ** 2, axis=1))))


def body_l2(space: DofSpace, fn: Optional[PointFunction]) -> float:
    if fn is None:
        return 0.0
    points = space.mesh.map_points(fem.CELL_RULE.points)
    weights = space.mesh.jacobians[1][:, None] * fem.CELL_RULE.weights[None, :]
    values = np.asarray(fn(points.reshape(-1, 2)), dtype=float).reshape(points.shape)
    return float(np.sqrt(np.sum(weights * np.sum(values ** 2, axis=2))))


def energy_estimate_check(sol: StationarySolution, problem: StationaryProblem) -> EnergyEstimateReport:
    """Empirical ratio ||u||_H1 / (||g||_L2(Γe) + ||f||_L2 + ||rho0||_L2(Γ0))."""
    data = (
        boundary_l2(problem.space, problem.g, BoundaryTag.GAMMA_E)
        + body_l2(problem.space, problem.f)
        + boundary_l2(problem.space, problem.rho0, BoundaryTag.GAMMA_0)
    )
    h1 = fem.h1_norm(sol.u)
    ratio = h1 / data if data > 0.0 else 0.0
    return EnergyEstimateReport(h=problem.space.mesh.h, h1_norm=h1, data_norm=data, ratio=ratio)


def energy_ratios_stable(reports: Sequence[EnergyEstimateReport], rtol: float = 0.05) -> bool:
    """True when the ratio changes by at most rtol between the two finest meshes."""
    if len(reports) < 2:
        return True
    a, b = reports[-2].ratio, reports[-1].ratio
    if b == 0.0:
        return a == 0.0
    stable = abs(a - b) <= rtol * abs(b)
    if not stable:
        logger.warning(f"Energy ratio not stabilised under refinement: {a:.6g} -> {b:.6g}")
    return stable


# ── Convergence studies ────────────────────────────────────────────

def observed_orders(h: Sequence[float], errors: Sequence[float]) -> List[float]:
    orders = [math.nan]
    for i in range(1, len(h)):
        e0, e1 = errors[i - 1], errors[i]
        if e0 > 0.0 and e1 > 0.0:
            orders.append(math.log(e0 / e1) / math.log(h[i - 1] / h[i]))
        else:
            orders.append(math.nan)
    return orders


def convergence_study(spaces: Sequence[DofSpace], measure: Callable[[DofSpace], dict]) -> pd.DataFrame:
    """Run `measure` on each space; add an order column for every error column."""
    rows = []
    for space in spaces:
        row = {"h": space.mesh.h, "velocity_dofs": space.velocity_dof_count}
        row.update(measure(space))
        rows.append(row)
    df = pd.DataFrame(rows)
    for col in [c for c in df.columns if c.endswith("_error")]:
        df[col.replace("_error", "_order")] = observed_orders(df["h"].tolist(), df[col].tolist())
    return df
