"""Lagrange shape functions on the reference triangle.

P2 node order: vertices 0..2, then the midpoint of the edge opposite vertex k
(k = 0, 1, 2). Local edge k runs from vertex (k+1) % 3 to vertex (k+2) % 3.
"""
import numpy as np

REFERENCE_VERTICES = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
LOCAL_EDGES = np.array([[1, 2], [2, 0], [0, 1]])

# gradients of the barycentric coordinates in reference coordinates
_DL = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])


def barycentric(points: np.ndarray) -> np.ndarray:
    xi, eta = points[:, 0], points[:, 1]
    return np.column_stack([1.0 - xi - eta, xi, eta])


def p1_values(points: np.ndarray) -> np.ndarray:
    return barycentric(points)


def p1_gradients(points: np.ndarray) -> np.ndarray:
    return np.broadcast_to(_DL, (len(points), 3, 2)).copy()


def p2_values(points: np.ndarray) -> np.ndarray:
    L = barycentric(points)
    L0, L1, L2 = L[:, 0], L[:, 1], L[:, 2]
    return np.column_stack([
        L0 * (2.0 * L0 - 1.0),
        L1 * (2.0 * L1 - 1.0),
        L2 * (2.0 * L2 - 1.0),
        4.0 * L1 * L2,
        4.0 * L2 * L0,
        4.0 * L0 * L1,
    ])


def p2_gradients(points: np.ndarray) -> np.ndarray:
    """Shape (nq, 6, 2) reference gradients."""
    L = barycentric(points)
    out = np.empty((len(points), 6, 2))
    for i in range(3):
        out[:, i, :] = (4.0 * L[:, i] - 1.0)[:, None] * _DL[i][None, :]
    for k, (a, b) in enumerate(LOCAL_EDGES):
        out[:, 3 + k, :] = 4.0 * (L[:, b][:, None] * _DL[a][None, :] + L[:, a][:, None] * _DL[b][None, :])
    return out


def p2_hessians() -> np.ndarray:
    """Shape (6, 2, 2) reference Hessians; constant on the element."""
    out = np.empty((6, 2, 2))
    for i in range(3):
        out[i] = 4.0 * np.outer(_DL[i], _DL[i])
    for k, (a, b) in enumerate(LOCAL_EDGES):
        out[3 + k] = 4.0 * (np.outer(_DL[a], _DL[b]) + np.outer(_DL[b], _DL[a]))
    return out


def edge_reference_points(local_edge: int, t: np.ndarray) -> np.ndarray:
    """Map edge parameters t in [0, 1] onto local edge `local_edge` of the reference triangle."""
    a, b = LOCAL_EDGES[local_edge]
    return REFERENCE_VERTICES[a][None, :] + t[:, None] * (REFERENCE_VERTICES[b] - REFERENCE_VERTICES[a])[None, :]


def edge_p2_values(t: np.ndarray) -> np.ndarray:
    """1D quadratic trace basis in order (start, end, midpoint)."""
    return np.column_stack([(1.0 - t) * (1.0 - 2.0 * t), t * (2.0 * t - 1.0), 4.0 * t * (1.0 - t)])
