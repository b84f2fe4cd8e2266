"""Quadrature rules on the reference triangle, the unit interval and the exact annulus."""
import math
from dataclasses import dataclass

import numpy as np

from app.core.errors import PreconditionError


@dataclass(frozen=True)
class TriangleRule:
    """Points in reference coordinates on (0,0),(1,0),(0,1); weights sum to 1/2."""
    points: np.ndarray
    weights: np.ndarray
    degree: int


@dataclass(frozen=True)
class EdgeRule:
    """Points on [0, 1]; weights sum to 1."""
    points: np.ndarray
    weights: np.ndarray
    degree: int


@dataclass(frozen=True)
class AnnulusRule:
    """Tensor rule on the exact annulus R0 < |x| < R1 plus both exact boundary circles."""
    R0: float
    R1: float
    points: np.ndarray
    weights: np.ndarray
    outer_points: np.ndarray
    outer_weights: np.ndarray
    outer_normals: np.ndarray
    inner_points: np.ndarray
    inner_weights: np.ndarray
    inner_normals: np.ndarray

    @property
    def boundary_points(self) -> np.ndarray:
        return np.vstack([self.outer_points, self.inner_points])

    @property
    def boundary_weights(self) -> np.ndarray:
        return np.concatenate([self.outer_weights, self.inner_weights])

    @property
    def boundary_normals(self) -> np.ndarray:
        return np.vstack([self.outer_normals, self.inner_normals])


def _radon_seven_point() -> TriangleRule:
    s15 = math.sqrt(15.0)
    a = (6.0 - s15) / 21.0
    b = (6.0 + s15) / 21.0
    wa = (155.0 - s15) / 2400.0
    wb = (155.0 + s15) / 2400.0
    points = np.array([
        [1.0 / 3.0, 1.0 / 3.0],
        [a, a], [1.0 - 2.0 * a, a], [a, 1.0 - 2.0 * a],
        [b, b], [1.0 - 2.0 * b, b], [b, 1.0 - 2.0 * b],
    ])
    weights = np.array([9.0 / 80.0, wa, wa, wa, wb, wb, wb])
    return TriangleRule(points=points, weights=weights, degree=5)


def _gauss01(n: int):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def triangle_rule(degree: int = 5) -> TriangleRule:
    """Exact for polynomials up to `degree`; collapsed Gauss beyond degree 5."""
    if degree < 1:
        raise PreconditionError(f"quadrature degree must be positive, got {degree}")
    if degree <= 5:
        return _radon_seven_point()
    n = int(math.ceil((degree + 2) / 2.0))
    u, wu = _gauss01(n)
    v, wv = _gauss01(n)
    uu, vv = np.meshgrid(u, v, indexing="ij")
    ww = np.outer(wu, wv) * (1.0 - uu)
    points = np.column_stack([uu.ravel(), (vv * (1.0 - uu)).ravel()])
    return TriangleRule(points=points, weights=ww.ravel(), degree=2 * n - 2)


def edge_rule(degree: int = 5) -> EdgeRule:
    n = max(1, int(math.ceil((degree + 1) / 2.0)))
    t, w = _gauss01(n)
    return EdgeRule(points=t, weights=w, degree=2 * n - 1)


def annulus_rule(R0: float, R1: float, n_radial: int = 24, n_angular: int = 256) -> AnnulusRule:
    """Gauss-Legendre in r, trapezoid in theta (spectrally accurate for periodic integrands)."""
    if not 0.0 < R0 < R1:
        raise PreconditionError(f"annulus radii must satisfy 0 < R0 < R1, got {R0}, {R1}")
    x, w = np.polynomial.legendre.leggauss(n_radial)
    r = R0 + 0.5 * (R1 - R0) * (x + 1.0)
    wr = 0.5 * (R1 - R0) * w
    theta = 2.0 * np.pi * np.arange(n_angular) / n_angular
    dtheta = 2.0 * np.pi / n_angular
    rr, tt = np.meshgrid(r, theta, indexing="ij")
    points = np.column_stack([(rr * np.cos(tt)).ravel(), (rr * np.sin(tt)).ravel()])
    weights = (np.outer(wr * r, np.full(n_angular, dtheta))).ravel()

    radial = np.column_stack([np.cos(theta), np.sin(theta)])
    return AnnulusRule(
        R0=R0,
        R1=R1,
        points=points,
        weights=weights,
        outer_points=R1 * radial,
        outer_weights=np.full(n_angular, R1 * dtheta),
        outer_normals=radial.copy(),
        inner_points=R0 * radial,
        inner_weights=np.full(n_angular, R0 * dtheta),
        inner_normals=-radial,
    )


def composite_gauss(t0: float, t1: float, n_intervals: int, order: int = 4):
    """Composite Gauss-Legendre nodes and weights on [t0, t1]."""
    n_intervals = max(1, int(n_intervals))
    x, w = _gauss01(order)
    edges = np.linspace(t0, t1, n_intervals + 1)
    width = np.diff(edges)
    nodes = (edges[:-1, None] + width[:, None] * x[None, :]).ravel()
    weights = (width[:, None] * w[None, :]).ravel()
    return nodes, weights
