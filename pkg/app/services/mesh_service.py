"""
Structured triangulations of the annulus R0 < r < R1.

The outer circle is tagged Γe (accessible) and the inner circle Γ0
(inaccessible). Meshes are immutable; refine() returns a new mesh.
"""

import math
import logging
from typing import List

import numpy as np
from pydantic import ValidationError

from app.core.errors import ConfigError, MeshValidationError
from app.models.geometry import AnnulusSpec, BoundaryTag, Mesh

logger = logging.getLogger(__name__)


# ── Construction ───────────────────────────────────────────────────

def annulus_spec(R0: float, R1: float, h: float) -> AnnulusSpec:
    """Validated geometry; bad radii or mesh size surface as ConfigError."""
    try:
        return AnnulusSpec(R0=R0, R1=R1, h=h)
    except ValidationError as e:
        raise ConfigError(f"invalid annulus geometry: {e}") from e


def build_annulus(spec: AnnulusSpec) -> Mesh:
    """Polar grid: rings x sectors, each cell split into two CCW triangles."""
    n_layers = max(2, int(math.ceil((spec.R1 - spec.R0) / spec.h)))
    n_sectors = max(8, int(math.ceil(2.0 * math.pi * spec.R1 / spec.h)))

    radii = np.linspace(spec.R0, spec.R1, n_layers + 1)
    theta = 2.0 * np.pi * np.arange(n_sectors) / n_sectors
    rr, tt = np.meshgrid(radii, theta, indexing="ij")
    vertices = np.column_stack([(rr * np.cos(tt)).ravel(), (rr * np.sin(tt)).ravel()])

    j, i = np.meshgrid(np.arange(n_layers), np.arange(n_sectors), indexing="ij")
    j, i = j.ravel(), i.ravel()
    ip = (i + 1) % n_sectors
    a = j * n_sectors + i
    b = j * n_sectors + ip
    c = (j + 1) * n_sectors + ip
    d = (j + 1) * n_sectors + i
    triangles = np.vstack([np.column_stack([a, d, c]), np.column_stack([a, c, b])])

    mesh = from_triangles(vertices, triangles, spec.R0, spec.R1, spec.h)
    logger.info(
        f"Built annulus mesh R0={spec.R0} R1={spec.R1} h={spec.h}: "
        f"{mesh.n_vertices} vertices, {mesh.n_triangles} triangles"
    )
    return mesh


def from_triangles(
    vertices: np.ndarray,
    triangles: np.ndarray,
    R0: float,
    R1: float,
    h: float,
    level: int = 0,
) -> Mesh:
    """Derive edges, boundary edges and tags from raw vertex/triangle arrays."""
    vertices = np.asarray(vertices, dtype=float)
    triangles = np.asarray(triangles, dtype=np.int64).copy()

    # enforce CCW orientation
    v = vertices[triangles]
    signed = (v[:, 1, 0] - v[:, 0, 0]) * (v[:, 2, 1] - v[:, 0, 1]) - (v[:, 1, 1] - v[:, 0, 1]) * (v[:, 2, 0] - v[:, 0, 0])
    flip = signed < 0
    triangles[flip] = triangles[flip][:, [0, 2, 1]]

    # local edge k is opposite vertex k: (v1, v2), (v2, v0), (v0, v1)
    local = np.stack([triangles[:, [1, 2]], triangles[:, [2, 0]], triangles[:, [0, 1]]], axis=1)
    keyed = np.sort(local.reshape(-1, 2), axis=1)
    edges, inverse, counts = np.unique(keyed, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    triangle_edges = inverse.reshape(-1, 3)

    boundary_slots = np.flatnonzero(counts[inverse] == 1)
    boundary_triangles = boundary_slots // 3
    boundary_local_edges = boundary_slots % 3
    boundary_vertices = local.reshape(-1, 2)[boundary_slots]
    boundary_edges = inverse[boundary_slots]

    mid = 0.5 * (vertices[boundary_vertices[:, 0]] + vertices[boundary_vertices[:, 1]])
    r_mid = np.hypot(mid[:, 0], mid[:, 1])
    tags = np.where(np.abs(r_mid - R0) < np.abs(r_mid - R1), int(BoundaryTag.GAMMA_0), int(BoundaryTag.GAMMA_E))

    order = np.lexsort((np.arctan2(mid[:, 1], mid[:, 0]), tags))
    return Mesh(
        vertices=vertices,
        triangles=triangles,
        edges=edges,
        triangle_edges=triangle_edges,
        boundary_edges=boundary_edges[order],
        boundary_vertices=boundary_vertices[order],
        boundary_tags=tags[order],
        boundary_triangles=boundary_triangles[order],
        boundary_local_edges=boundary_local_edges[order],
        R0=float(R0),
        R1=float(R1),
        h=float(h),
        level=level,
    )


# ── Refinement ─────────────────────────────────────────────────────

def refine(mesh: Mesh) -> Mesh:
    """Uniform quadrisection; boundary midpoints are pushed onto their circle."""
    n = mesh.n_vertices
    midpoints = mesh.edge_midpoints.copy()

    tag_of_edge = np.zeros(mesh.n_edges, dtype=int)
    tag_of_edge[mesh.boundary_edges] = mesh.boundary_tags
    for tag in (BoundaryTag.GAMMA_E, BoundaryTag.GAMMA_0):
        sel = tag_of_edge == int(tag)
        r = np.hypot(midpoints[sel, 0], midpoints[sel, 1])
        midpoints[sel] *= (mesh.radius(tag) / r)[:, None]

    vertices = np.vstack([mesh.vertices, midpoints])
    t = mesh.triangles
    m = n + mesh.triangle_edges
    children = np.vstack([
        np.column_stack([t[:, 0], m[:, 2], m[:, 1]]),
        np.column_stack([m[:, 2], t[:, 1], m[:, 0]]),
        np.column_stack([m[:, 1], m[:, 0], t[:, 2]]),
        np.column_stack([m[:, 0], m[:, 1], m[:, 2]]),
    ])
    refined = from_triangles(vertices, children, mesh.R0, mesh.R1, 0.5 * mesh.h, level=mesh.level + 1)
    logger.debug(f"Refined mesh to level {refined.level}: {refined.n_triangles} triangles")
    return refined


def refinement_hierarchy(spec: AnnulusSpec, levels: int) -> List[Mesh]:
    meshes = [build_annulus(spec)]
    for _ in range(levels):
        meshes.append(refine(meshes[-1]))
    return meshes


# ── Validation and diagnostics ─────────────────────────────────────

def euler_characteristic(mesh: Mesh) -> int:
    return mesh.n_vertices - mesh.n_edges + mesh.n_triangles


def boundary_length(mesh: Mesh, tag: BoundaryTag) -> float:
    return float(mesh.boundary_segment(tag)[2].sum())


def validate_mesh(mesh: Mesh) -> Mesh:
    """Raise MeshValidationError unless the annulus mesh invariants hold."""
    areas = mesh.areas
    if np.any(areas <= 0.0):
        raise MeshValidationError(f"{int(np.sum(areas <= 0.0))} triangles with non-positive area")

    tol = 1e-12 * mesh.R1
    for tag in (BoundaryTag.GAMMA_E, BoundaryTag.GAMMA_0):
        ids = mesh.boundary_vertex_ids(tag)
        if len(ids) == 0:
            raise MeshValidationError(f"no boundary edges tagged {tag.name}")
        r = np.hypot(mesh.vertices[ids, 0], mesh.vertices[ids, 1])
        deviation = float(np.max(np.abs(r - mesh.radius(tag))))
        if deviation > tol:
            raise MeshValidationError(f"{tag.name} vertex off its circle by {deviation:.3e}")

    _, _, _, normal, tangent = mesh.boundary_segment()
    if np.max(np.abs(np.einsum("ij,ij->i", normal, tangent))) > 1e-12:
        raise MeshValidationError("boundary normals are not orthogonal to tangents")

    chi = euler_characteristic(mesh)
    if chi != 0:
        raise MeshValidationError(f"Euler characteristic {chi} != 0, mesh is not an annulus")
    return mesh


def mesh_summary(mesh: Mesh) -> dict:
    exact_area = math.pi * (mesh.R1 ** 2 - mesh.R0 ** 2)
    return {
        "level": mesh.level,
        "h": mesh.h,
        "vertices": mesh.n_vertices,
        "edges": mesh.n_edges,
        "triangles": mesh.n_triangles,
        "euler_characteristic": euler_characteristic(mesh),
        "area_error": abs(float(mesh.areas.sum()) - exact_area) / exact_area,
        "gamma0_length_error": abs(boundary_length(mesh, BoundaryTag.GAMMA_0) - 2 * math.pi * mesh.R0) / (2 * math.pi * mesh.R0),
        "gammae_length_error": abs(boundary_length(mesh, BoundaryTag.GAMMA_E) - 2 * math.pi * mesh.R1) / (2 * math.pi * mesh.R1),
    }
