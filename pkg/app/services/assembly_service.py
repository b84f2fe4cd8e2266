"""
Taylor-Hood assembly on annulus meshes.

All element loops are vectorised over triangles with einsum and scattered
into scipy.sparse COO matrices; duplicate entries are summed on conversion.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Union

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from app.core import basis
from app.core.errors import PreconditionError, SingularSystemError
from app.core.quadrature import EdgeRule, TriangleRule, edge_rule, triangle_rule
from app.models.fields import (
    BoundaryFunction,
    DiscreteField,
    DofSpace,
    FieldKind,
    PointFunction,
    RobinField,
)
from app.models.geometry import BoundaryTag

logger = logging.getLogger(__name__)

CELL_RULE = triangle_rule(5)
EDGE_RULE = edge_rule(5)


# ── Element geometry ───────────────────────────────────────────────

@dataclass
class CellEvaluation:
    points: np.ndarray      # (T, nq, 2)
    weights: np.ndarray     # (T, nq)
    values: np.ndarray      # (T, nq) or (T, nq, 2)
    gradients: np.ndarray   # (T, nq, 2) or (T, nq, 2, 2); [.., i, j] = d_j u_i
    hessians: Optional[np.ndarray] = None  # (T, 2, 2) or (T, 2, 2, 2), elementwise constant (P2)


@dataclass
class BoundaryTrace:
    """Field samples at edge quadrature points of one boundary component (edge-major order)."""
    tag: BoundaryTag
    points: np.ndarray            # (n, 2)
    weights: np.ndarray           # (n,)
    normals: np.ndarray           # (n, 2)
    tangents: np.ndarray          # (n, 2)
    values: np.ndarray            # (n,) or (n, 2)
    gradients: np.ndarray         # (n, 2) or (n, 2, 2)

    @property
    def normal_derivative(self) -> np.ndarray:
        if self.gradients.ndim == 3:
            return np.einsum("nij,nj->ni", self.gradients, self.normals)
        return np.einsum("nj,nj->n", self.gradients, self.normals)

    def integrate(self, values: np.ndarray) -> float:
        return float(np.dot(self.weights, values))

    def l2_norm(self, values: np.ndarray) -> float:
        sq = values ** 2 if values.ndim == 1 else np.sum(values ** 2, axis=tuple(range(1, values.ndim)))
        return float(np.sqrt(max(self.integrate(sq), 0.0)))


def _physical_gradients(space: DofSpace, ref_grads: np.ndarray) -> np.ndarray:
    """(nq, k, 2) reference gradients -> (T, nq, k, 2) physical gradients."""
    inv = space.mesh.jacobians[2]
    return np.einsum("qik,tkj->tqij", ref_grads, inv)


def _cell_weights(space: DofSpace, rule: TriangleRule) -> np.ndarray:
    return space.mesh.jacobians[1][:, None] * rule.weights[None, :]


def _scatter(rows: np.ndarray, cols: np.ndarray, values: np.ndarray, shape) -> sp.csr_matrix:
    return sp.coo_matrix((values.ravel(), (rows.ravel(), cols.ravel())), shape=shape).tocsr()


def _cell_matrix(space: DofSpace, local: np.ndarray) -> sp.csr_matrix:
    dofs = space.cell_dofs
    rows = np.broadcast_to(dofs[:, :, None], local.shape)
    cols = np.broadcast_to(dofs[:, None, :], local.shape)
    return _scatter(rows, cols, local, (space.n_nodes, space.n_nodes))


# ── Matrices ───────────────────────────────────────────────────────

def assemble_scalar_stiffness(space: DofSpace, rule: TriangleRule = CELL_RULE) -> sp.csr_matrix:
    G = _physical_gradients(space, basis.p2_gradients(rule.points))
    w = _cell_weights(space, rule)
    return _cell_matrix(space, np.einsum("tq,tqik,tqjk->tij", w, G, G))


def assemble_scalar_mass(space: DofSpace, rule: TriangleRule = CELL_RULE) -> sp.csr_matrix:
    phi = basis.p2_values(rule.points)
    w = _cell_weights(space, rule)
    return _cell_matrix(space, np.einsum("tq,qi,qj->tij", w, phi, phi))


def assemble_stiffness(space: DofSpace) -> sp.csr_matrix:
    """Vector Laplacian (grad u : grad v) on the blocked velocity dofs."""
    Ks = assemble_scalar_stiffness(space)
    return sp.block_diag((Ks, Ks), format="csr")


def assemble_velocity_mass(space: DofSpace) -> sp.csr_matrix:
    Ms = assemble_scalar_mass(space)
    return sp.block_diag((Ms, Ms), format="csr")


def assemble_divergence(space: DofSpace, rule: TriangleRule = CELL_RULE) -> sp.csr_matrix:
    """D[r, j] = integral of psi_r div(phi_j), pressure rows by velocity columns."""
    psi = basis.p1_values(rule.points)
    G = _physical_gradients(space, basis.p2_gradients(rule.points))
    w = _cell_weights(space, rule)
    rows = np.broadcast_to(space.mesh.triangles[:, :, None], (space.mesh.n_triangles, 3, 6))
    cols = np.broadcast_to(space.cell_dofs[:, None, :], (space.mesh.n_triangles, 3, 6))
    shape = (space.pressure_dof_count, space.n_nodes)
    blocks = []
    for d in range(2):
        local = np.einsum("tq,qr,tqj->trj", w, psi, G[..., d])
        blocks.append(_scatter(rows, cols, local, shape))
    return sp.hstack(blocks, format="csr")


def assemble_robin_mass(space: DofSpace, q: RobinField, rule: EdgeRule = EDGE_RULE) -> sp.csr_matrix:
    """Integral over Γ0 of q u.v with q linear along each edge."""
    q.check_lower_bound()
    nodes = space.boundary_edge_nodes(BoundaryTag.GAMMA_0)
    _, _, length, _, _ = space.mesh.boundary_segment(BoundaryTag.GAMMA_0)
    N = basis.edge_p2_values(rule.points)
    qv = q.at_edge_parameters(rule.points).reshape(len(nodes), -1)
    w = length[:, None] * rule.weights[None, :] * qv
    local = np.einsum("eq,qi,qj->eij", w, N, N)
    rows = np.broadcast_to(nodes[:, :, None], local.shape)
    cols = np.broadcast_to(nodes[:, None, :], local.shape)
    Rs = _scatter(rows, cols, local, (space.n_nodes, space.n_nodes))
    return sp.block_diag((Rs, Rs), format="csr")


# ── Load vectors ───────────────────────────────────────────────────

def boundary_quadrature(space: DofSpace, tag: BoundaryTag, rule: EdgeRule = EDGE_RULE):
    """Points, weights, normals and tangents at edge quadrature points, edge-major."""
    a, b, length, normal, tangent = space.mesh.boundary_segment(tag)
    t = rule.points
    points = a[:, None, :] + t[None, :, None] * (b - a)[:, None, :]
    weights = length[:, None] * rule.weights[None, :]
    nq = len(t)
    return (
        points.reshape(-1, 2),
        weights.ravel(),
        np.repeat(normal, nq, axis=0),
        np.repeat(tangent, nq, axis=0),
    )


def assemble_boundary_load(
    space: DofSpace,
    fn: Optional[BoundaryFunction],
    tag: BoundaryTag,
    rule: EdgeRule = EDGE_RULE,
) -> np.ndarray:
    """Velocity load vector <fn, v> over one boundary component."""
    load = np.zeros(space.velocity_dof_count)
    if fn is None:
        return load
    points, weights, normals, _ = boundary_quadrature(space, tag, rule)
    values = np.asarray(fn(points, normals), dtype=float)
    if values.shape != (len(points), 2):
        raise PreconditionError(f"boundary data must return shape ({len(points)}, 2), got {values.shape}")
    nodes = space.boundary_edge_nodes(tag)
    N = basis.edge_p2_values(rule.points)
    nq = len(rule.points)
    wv = (weights[:, None] * values).reshape(len(nodes), nq, 2)
    local = np.einsum("eqc,qi->eic", wv, N)
    for c in range(2):
        np.add.at(load, nodes.ravel() + c * space.n_nodes, local[..., c].ravel())
    return load


def assemble_neumann_load(space: DofSpace, g: Optional[BoundaryFunction]) -> np.ndarray:
    return assemble_boundary_load(space, g, BoundaryTag.GAMMA_E)


def assemble_body_load(space: DofSpace, f: Optional[PointFunction], rule: TriangleRule = CELL_RULE) -> np.ndarray:
    load = np.zeros(space.velocity_dof_count)
    if f is None:
        return load
    points = space.mesh.map_points(rule.points)
    T, nq, _ = points.shape
    values = np.asarray(f(points.reshape(-1, 2)), dtype=float).reshape(T, nq, 2)
    w = _cell_weights(space, rule)
    phi = basis.p2_values(rule.points)
    local = np.einsum("tq,tqc,qi->tic", w, values, phi)
    for c in range(2):
        np.add.at(load, space.cell_dofs.ravel() + c * space.n_nodes, local[..., c].ravel())
    return load


def assemble_scalar_load(space: DofSpace, f: Union[float, PointFunction], rule: TriangleRule = CELL_RULE) -> np.ndarray:
    points = space.mesh.map_points(rule.points)
    T, nq, _ = points.shape
    if callable(f):
        values = np.asarray(f(points.reshape(-1, 2)), dtype=float).reshape(T, nq)
    else:
        values = np.full((T, nq), float(f))
    w = _cell_weights(space, rule)
    local = np.einsum("tq,tq,qi->ti", w, values, basis.p2_values(rule.points))
    load = np.zeros(space.n_nodes)
    np.add.at(load, space.cell_dofs.ravel(), local.ravel())
    return load


# ── Interpolation ──────────────────────────────────────────────────

def interpolate_velocity(space: DofSpace, fn: PointFunction) -> DiscreteField:
    values = np.asarray(fn(space.node_coordinates), dtype=float)
    return DiscreteField(space, FieldKind.VELOCITY, np.concatenate([values[:, 0], values[:, 1]]))


def interpolate_pressure(space: DofSpace, fn: PointFunction) -> DiscreteField:
    values = np.broadcast_to(np.asarray(fn(space.mesh.vertices), dtype=float), (space.pressure_dof_count,))
    return DiscreteField(space, FieldKind.PRESSURE, values.copy())


def interpolate_scalar(space: DofSpace, fn: PointFunction) -> DiscreteField:
    values = np.broadcast_to(np.asarray(fn(space.node_coordinates), dtype=float), (space.n_nodes,))
    return DiscreteField(space, FieldKind.SCALAR, values.copy())


# ── Field evaluation ───────────────────────────────────────────────

def _cell_coefficients(field: DiscreteField) -> np.ndarray:
    """(T, k) or (T, 6, 2) coefficients gathered per triangle."""
    space = field.space
    if field.kind == FieldKind.PRESSURE:
        return field.coefficients[space.mesh.triangles]
    if field.kind == FieldKind.SCALAR:
        return field.coefficients[space.cell_dofs]
    ux, uy = field.components()
    return np.stack([ux[space.cell_dofs], uy[space.cell_dofs]], axis=2)


def evaluate_cells(field: DiscreteField, rule: TriangleRule = CELL_RULE, with_hessians: bool = False) -> CellEvaluation:
    space = field.space
    points = space.mesh.map_points(rule.points)
    weights = _cell_weights(space, rule)
    C = _cell_coefficients(field)
    if field.kind == FieldKind.PRESSURE:
        phi = basis.p1_values(rule.points)
        G = _physical_gradients(space, basis.p1_gradients(rule.points))
    else:
        phi = basis.p2_values(rule.points)
        G = _physical_gradients(space, basis.p2_gradients(rule.points))

    hessians = None
    if field.kind == FieldKind.VELOCITY:
        values = np.einsum("qi,tic->tqc", phi, C)
        gradients = np.einsum("tqid,tic->tqcd", G, C)
    else:
        values = np.einsum("qi,ti->tq", phi, C)
        gradients = np.einsum("tqid,ti->tqd", G, C)

    if with_hessians and field.kind != FieldKind.PRESSURE:
        inv = space.mesh.jacobians[2]
        H = np.einsum("tka,ikl,tlb->tiab", inv, basis.p2_hessians(), inv)
        if field.kind == FieldKind.VELOCITY:
            hessians = np.einsum("tiab,tic->tcab", H, C)
        else:
            hessians = np.einsum("tiab,ti->tab", H, C)
    return CellEvaluation(points, weights, values, gradients, hessians)


def boundary_traces(field: DiscreteField, tag: BoundaryTag, rule: EdgeRule = EDGE_RULE) -> BoundaryTrace:
    """Values and gradients from the adjacent triangle at boundary quadrature points."""
    space = field.space
    mesh = space.mesh
    mask = mesh.boundary_mask(tag)
    tri = mesh.boundary_triangles[mask]
    local_edge = mesh.boundary_local_edges[mask]
    points, weights, normals, tangents = boundary_quadrature(space, tag, rule)

    ref = [basis.edge_reference_points(k, rule.points) for k in range(3)]
    if field.kind == FieldKind.PRESSURE:
        vals = np.stack([basis.p1_values(r) for r in ref])[local_edge]
        grads = np.stack([basis.p1_gradients(r) for r in ref])[local_edge]
    else:
        vals = np.stack([basis.p2_values(r) for r in ref])[local_edge]
        grads = np.stack([basis.p2_gradients(r) for r in ref])[local_edge]
    G = np.einsum("eqik,ekj->eqij", grads, mesh.jacobians[2][tri])
    C = _cell_coefficients(field)[tri]

    if field.kind == FieldKind.VELOCITY:
        values = np.einsum("eqi,eic->eqc", vals, C).reshape(-1, 2)
        gradients = np.einsum("eqid,eic->eqcd", G, C).reshape(-1, 2, 2)
    else:
        values = np.einsum("eqi,ei->eq", vals, C).ravel()
        gradients = np.einsum("eqid,ei->eqd", G, C).reshape(-1, 2)
    return BoundaryTrace(tag, points, weights, normals, tangents, values, gradients)


# ── Norms ──────────────────────────────────────────────────────────

def _sum_sq(values: np.ndarray, lead: int = 2) -> np.ndarray:
    if values.ndim == lead:
        return values ** 2
    return np.sum(values ** 2, axis=tuple(range(lead, values.ndim)))


def l2_norm(field: DiscreteField) -> float:
    ev = evaluate_cells(field)
    return float(np.sqrt(np.sum(ev.weights * _sum_sq(ev.values))))


def h1_seminorm(field: DiscreteField) -> float:
    ev = evaluate_cells(field)
    return float(np.sqrt(np.sum(ev.weights * _sum_sq(ev.gradients))))


def h1_norm(field: DiscreteField) -> float:
    return float(np.hypot(l2_norm(field), h1_seminorm(field)))


def broken_h2_norm(field: DiscreteField) -> float:
    """H1 norm plus elementwise second derivatives (continuous P2 fields only)."""
    ev = evaluate_cells(field, with_hessians=True)
    area = field.space.mesh.areas
    second = np.sum(area * _sum_sq(ev.hessians, lead=1))
    first = np.sum(ev.weights * (_sum_sq(ev.values) + _sum_sq(ev.gradients)))
    return float(np.sqrt(first + second))


def l2_error(field: DiscreteField, exact: PointFunction) -> float:
    ev = evaluate_cells(field)
    ref = np.asarray(exact(ev.points.reshape(-1, 2)), dtype=float).reshape(ev.values.shape)
    return float(np.sqrt(np.sum(ev.weights * _sum_sq(ev.values - ref))))


def h1_seminorm_error(field: DiscreteField, exact_gradient: PointFunction) -> float:
    ev = evaluate_cells(field)
    ref = np.asarray(exact_gradient(ev.points.reshape(-1, 2)), dtype=float).reshape(ev.gradients.shape)
    return float(np.sqrt(np.sum(ev.weights * _sum_sq(ev.gradients - ref))))


# ── Scalar Dirichlet problems ──────────────────────────────────────

BoundaryValue = Union[float, PointFunction]


def solve_scalar_dirichlet(
    space: DofSpace,
    source: float,
    boundary_values: Dict[BoundaryTag, BoundaryValue],
) -> DiscreteField:
    """P2 solution of Laplace(psi) = source with Dirichlet data on both circles."""
    K = assemble_scalar_stiffness(space).tocsr()
    rhs = -assemble_scalar_load(space, source) if source else np.zeros(space.n_nodes)

    psi = np.zeros(space.n_nodes)
    fixed = np.zeros(space.n_nodes, dtype=bool)
    for tag, data in boundary_values.items():
        nodes = space.boundary_nodes(tag)
        if callable(data):
            psi[nodes] = np.asarray(data(space.node_coordinates[nodes]), dtype=float)
        else:
            psi[nodes] = float(data)
        fixed[nodes] = True

    free = np.flatnonzero(~fixed)
    rhs = rhs - K @ psi
    Kff = K[free][:, free].tocsc()
    sol = spsolve(Kff, rhs[free])
    if not np.all(np.isfinite(sol)):
        raise SingularSystemError("scalar Dirichlet system is singular")
    psi[free] = sol
    return DiscreteField(space, FieldKind.SCALAR, psi)
