"""
Boundary measurements on Γe: traces of u, du/dn, p and dp/dn at edge
quadrature points, and the aggregate B of their L2(Γe) norms.
"""

import logging
from dataclasses import dataclass, replace
from typing import Dict, Optional

import numpy as np

from app.core.errors import PreconditionError
from app.models.fields import DiscreteField
from app.models.geometry import BoundaryTag
from app.services import assembly_service as fem

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class BoundaryMeasurement:
    points: np.ndarray
    weights: np.ndarray
    normals: np.ndarray
    velocity: np.ndarray                     # (n, 2)
    velocity_normal_derivative: np.ndarray   # (n, 2)
    pressure: np.ndarray                     # (n,)
    pressure_normal_derivative: np.ndarray   # (n,)
    time: Optional[float] = None             # None means stationary

    def _l2(self, values: np.ndarray) -> float:
        sq = values ** 2 if values.ndim == 1 else np.sum(values ** 2, axis=1)
        return float(np.sqrt(max(np.dot(self.weights, sq), 0.0)))

    @property
    def norms(self) -> Dict[str, float]:
        return {
            "u": self._l2(self.velocity),
            "p": self._l2(self.pressure),
            "dudn": self._l2(self.velocity_normal_derivative),
            "dpdn": self._l2(self.pressure_normal_derivative),
        }

    @property
    def B(self) -> float:
        return float(sum(self.norms.values()))

    def _check(self, other: "BoundaryMeasurement"):
        if self.points.shape != other.points.shape or not np.allclose(self.points, other.points, rtol=0.0, atol=1e-14):
            raise PreconditionError("measurements were taken at different boundary points")

    def __sub__(self, other: "BoundaryMeasurement") -> "BoundaryMeasurement":
        self._check(other)
        return replace(
            self,
            velocity=self.velocity - other.velocity,
            velocity_normal_derivative=self.velocity_normal_derivative - other.velocity_normal_derivative,
            pressure=self.pressure - other.pressure,
            pressure_normal_derivative=self.pressure_normal_derivative - other.pressure_normal_derivative,
        )


def extract_measurement(sol, p: Optional[DiscreteField] = None, time: Optional[float] = None) -> BoundaryMeasurement:
    """Γe traces of a solution.

    Accepts anything with `u` and `p` attributes (stationary solutions,
    trajectory samples) or a velocity field plus a pressure field.
    """
    if p is None:
        u, p = sol.u, sol.p
        time = getattr(sol, "time", time)
    else:
        u = sol
    tu = fem.boundary_traces(u, BoundaryTag.GAMMA_E)
    tp = fem.boundary_traces(p, BoundaryTag.GAMMA_E)
    return BoundaryMeasurement(
        points=tu.points,
        weights=tu.weights,
        normals=tu.normals,
        velocity=tu.values,
        velocity_normal_derivative=tu.normal_derivative,
        pressure=tp.values,
        pressure_normal_derivative=tp.normal_derivative,
        time=time,
    )


def max_over_samples(measurements) -> Dict[str, float]:
    """L-infinity in time of each constituent norm of a measurement sequence."""
    keys = ("u", "p", "dudn", "dpdn")
    out = {k: 0.0 for k in keys}
    for m in measurements:
        for k, v in m.norms.items():
            out[k] = max(out[k], v)
    return out
