from enum import IntEnum
from functools import cached_property
from dataclasses import dataclass
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator


class BoundaryTag(IntEnum):
    GAMMA_E = 1  # outer circle, accessible (Neumann, measured)
    GAMMA_0 = 2  # inner circle, inaccessible (Robin)


class AnnulusSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    R0: float = Field(0.5, gt=0.0)
    R1: float = Field(1.0, gt=0.0)
    h: float = Field(0.1, gt=0.0)

    @model_validator(mode="after")
    def check_geometry(self):
        if not self.R0 < self.R1:
            raise ValueError(f"inner radius R0={self.R0} must be smaller than outer radius R1={self.R1}")
        if self.h >= 0.5 * (self.R1 - self.R0):
            raise ValueError(
                f"mesh size h={self.h} cannot resolve the annular gap {self.R1 - self.R0} (need h < gap/2)"
            )
        return self


@dataclass(frozen=True, eq=False)
class Mesh:
    """Conforming CCW triangulation of an annulus with tagged boundary edges.

    Boundary edges are stored in the orientation of their adjacent triangle so
    that the outward normal is the edge direction rotated clockwise.
    """
    vertices: np.ndarray          # (N, 2)
    triangles: np.ndarray         # (T, 3)
    edges: np.ndarray             # (E, 2) sorted vertex pairs
    triangle_edges: np.ndarray    # (T, 3) global edge of local edge k (opposite vertex k)
    boundary_edges: np.ndarray    # (Nb,) indices into edges
    boundary_vertices: np.ndarray # (Nb, 2) oriented endpoints
    boundary_tags: np.ndarray     # (Nb,) BoundaryTag values
    boundary_triangles: np.ndarray  # (Nb,)
    boundary_local_edges: np.ndarray  # (Nb,)
    R0: float
    R1: float
    h: float
    level: int = 0

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def jacobians(self):
        """(J, det, J^-1) per triangle, J columns are v1 - v0 and v2 - v0."""
        v = self.vertices[self.triangles]
        J = np.stack([v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]], axis=2)
        det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
        inv = np.empty_like(J)
        inv[:, 0, 0] = J[:, 1, 1] / det
        inv[:, 0, 1] = -J[:, 0, 1] / det
        inv[:, 1, 0] = -J[:, 1, 0] / det
        inv[:, 1, 1] = J[:, 0, 0] / det
        return J, det, inv

    @property
    def areas(self) -> np.ndarray:
        return 0.5 * self.jacobians[1]

    def map_points(self, ref_points: np.ndarray) -> np.ndarray:
        """Reference points (nq, 2) to physical points (T, nq, 2)."""
        J = self.jacobians[0]
        v0 = self.vertices[self.triangles[:, 0]]
        return v0[:, None, :] + np.einsum("tij,qj->tqi", J, ref_points)

    @cached_property
    def edge_midpoints(self) -> np.ndarray:
        return 0.5 * (self.vertices[self.edges[:, 0]] + self.vertices[self.edges[:, 1]])

    def boundary_mask(self, tag: BoundaryTag) -> np.ndarray:
        return self.boundary_tags == int(tag)

    def boundary_segment(self, tag: Optional[BoundaryTag] = None):
        """Oriented start/end points, lengths, unit normals and tangents of boundary edges."""
        sel = slice(None) if tag is None else self.boundary_mask(tag)
        bv = self.boundary_vertices[sel]
        a = self.vertices[bv[:, 0]]
        b = self.vertices[bv[:, 1]]
        d = b - a
        length = np.hypot(d[:, 0], d[:, 1])
        tangent = d / length[:, None]
        normal = np.column_stack([tangent[:, 1], -tangent[:, 0]])
        return a, b, length, normal, tangent

    def boundary_vertex_ids(self, tag: BoundaryTag) -> np.ndarray:
        return np.unique(self.boundary_vertices[self.boundary_mask(tag)])

    def radius(self, tag: BoundaryTag) -> float:
        return self.R1 if tag == BoundaryTag.GAMMA_E else self.R0
