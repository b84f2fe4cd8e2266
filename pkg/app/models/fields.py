from enum import Enum
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Optional

import numpy as np

from app.core.errors import PreconditionError, RobinBoundError
from app.models.geometry import BoundaryTag, Mesh

# f(points (n, 2)) -> values (n,) or (n, 2)
PointFunction = Callable[[np.ndarray], np.ndarray]
# g(points (n, 2), normals (n, 2)) -> vectors (n, 2)
BoundaryFunction = Callable[[np.ndarray, np.ndarray], np.ndarray]


class FieldKind(str, Enum):
    VELOCITY = "velocity"
    PRESSURE = "pressure"
    SCALAR = "scalar"  # continuous P2 scalar (lifting and weight functions)


@dataclass(frozen=True, eq=False)
class DofSpace:
    """Taylor-Hood P2-P1 dofs. Velocity coefficients are blocked as [ux; uy]."""
    mesh: Mesh

    @property
    def n_nodes(self) -> int:
        return self.mesh.n_vertices + self.mesh.n_edges

    @property
    def velocity_dof_count(self) -> int:
        return 2 * self.n_nodes

    @property
    def pressure_dof_count(self) -> int:
        return self.mesh.n_vertices

    @cached_property
    def node_coordinates(self) -> np.ndarray:
        return np.vstack([self.mesh.vertices, self.mesh.edge_midpoints])

    @cached_property
    def cell_dofs(self) -> np.ndarray:
        """(T, 6) scalar P2 node ids: vertices then edge midpoints."""
        return np.hstack([self.mesh.triangles, self.mesh.n_vertices + self.mesh.triangle_edges])

    def boundary_edge_nodes(self, tag: BoundaryTag) -> np.ndarray:
        """(nb, 3) scalar node ids (start, end, midpoint) of oriented boundary edges."""
        mask = self.mesh.boundary_mask(tag)
        bv = self.mesh.boundary_vertices[mask]
        mid = self.mesh.n_vertices + self.mesh.boundary_edges[mask]
        return np.column_stack([bv, mid])

    def boundary_nodes(self, tag: BoundaryTag) -> np.ndarray:
        return np.unique(self.boundary_edge_nodes(tag))

    def boundary_velocity_dofs(self, tag: BoundaryTag) -> np.ndarray:
        nodes = self.boundary_nodes(tag)
        return np.concatenate([nodes, nodes + self.n_nodes])

    def size(self, kind: "FieldKind") -> int:
        if kind == FieldKind.VELOCITY:
            return self.velocity_dof_count
        if kind == FieldKind.PRESSURE:
            return self.pressure_dof_count
        return self.n_nodes


@dataclass(frozen=True, eq=False)
class DiscreteField:
    space: DofSpace
    kind: FieldKind
    coefficients: np.ndarray

    def __post_init__(self):
        coefficients = np.asarray(self.coefficients, dtype=float)
        expected = self.space.size(self.kind)
        if coefficients.shape != (expected,):
            raise PreconditionError(
                f"{self.kind.value} field needs {expected} coefficients, got shape {coefficients.shape}"
            )
        object.__setattr__(self, "coefficients", coefficients)

    @classmethod
    def zeros(cls, space: DofSpace, kind: FieldKind) -> "DiscreteField":
        return cls(space, kind, np.zeros(space.size(kind)))

    def components(self):
        if self.kind != FieldKind.VELOCITY:
            raise PreconditionError("components() is only defined for velocity fields")
        n = self.space.n_nodes
        return self.coefficients[:n], self.coefficients[n:]

    def nodal_vectors(self) -> np.ndarray:
        ux, uy = self.components()
        return np.column_stack([ux, uy])

    def _check_compatible(self, other: "DiscreteField"):
        if other.space is not self.space or other.kind != self.kind:
            raise PreconditionError("fields live on different spaces or have different kinds")

    def __add__(self, other: "DiscreteField") -> "DiscreteField":
        self._check_compatible(other)
        return DiscreteField(self.space, self.kind, self.coefficients + other.coefficients)

    def __sub__(self, other: "DiscreteField") -> "DiscreteField":
        self._check_compatible(other)
        return DiscreteField(self.space, self.kind, self.coefficients - other.coefficients)

    def __mul__(self, scalar: float) -> "DiscreteField":
        return DiscreteField(self.space, self.kind, float(scalar) * self.coefficients)

    __rmul__ = __mul__

    def __neg__(self) -> "DiscreteField":
        return self * -1.0


@dataclass(frozen=True, eq=False)
class RobinField:
    """Piecewise-linear q on Γ0, stored at the sorted Γ0 vertex ids."""
    mesh: Mesh
    nodes: np.ndarray
    values: np.ndarray
    alpha: float
    bound: Optional[float] = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != self.nodes.shape:
            raise PreconditionError(f"expected {len(self.nodes)} Robin values, got shape {values.shape}")
        if not self.alpha > 0.0:
            raise PreconditionError(f"Robin lower bound alpha must be positive, got {self.alpha}")
        object.__setattr__(self, "values", values)

    @classmethod
    def from_function(cls, mesh: Mesh, fn: PointFunction, alpha: float, bound: Optional[float] = None) -> "RobinField":
        nodes = mesh.boundary_vertex_ids(BoundaryTag.GAMMA_0)
        values = np.broadcast_to(np.asarray(fn(mesh.vertices[nodes]), dtype=float), nodes.shape)
        return cls(mesh, nodes, values.copy(), alpha, bound)

    @classmethod
    def constant(cls, mesh: Mesh, value: float, alpha: Optional[float] = None) -> "RobinField":
        return cls.from_function(mesh, lambda x: np.full(len(x), float(value)), alpha if alpha is not None else float(value))

    def with_values(self, values: np.ndarray) -> "RobinField":
        return RobinField(self.mesh, self.nodes, values, self.alpha, self.bound)

    def __sub__(self, other: "RobinField") -> np.ndarray:
        return self.values - other.values

    def is_constant(self, value: Optional[float] = None, rtol: float = 1e-14) -> bool:
        ref = self.values[0] if value is None else value
        return bool(np.all(np.abs(self.values - ref) <= rtol * max(1.0, abs(ref))))

    def check_lower_bound(self) -> "RobinField":
        low = float(self.values.min())
        if low < self.alpha:
            raise RobinBoundError(f"q has nodal value {low:.6g} below alpha={self.alpha:.6g}")
        return self

    def edge_values(self) -> np.ndarray:
        """(nb0, 2) values at the oriented endpoints of each Γ0 edge."""
        bv = self.mesh.boundary_vertices[self.mesh.boundary_mask(BoundaryTag.GAMMA_0)]
        return self.values[np.searchsorted(self.nodes, bv)]

    def at_edge_parameters(self, t: np.ndarray) -> np.ndarray:
        """Values at parameters t on every Γ0 edge, shape (nb0 * nq,) in edge-major order."""
        ev = self.edge_values()
        return (ev[:, :1] * (1.0 - t[None, :]) + ev[:, 1:] * t[None, :]).ravel()
