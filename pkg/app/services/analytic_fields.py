"""
Closed-form fields with exact derivatives, built from sympy expressions.

Used as derivative oracles: manufactured Stokes data, Carleman test fields
and H^3 norms of analytic solutions.
"""

import itertools
import logging
from dataclasses import dataclass
from typing import Callable, Dict, Sequence, Union

import numpy as np
import sympy

from app.core.quadrature import AnnulusRule

logger = logging.getLogger(__name__)

X, Y = sympy.symbols("x y", real=True)

Expression = Union[sympy.Expr, float, int]


class AnalyticField:
    """Scalar (one expression) or vector (two expressions) field of (x, y)."""

    def __init__(self, name: str, expressions: Union[Expression, Sequence[Expression]]):
        if isinstance(expressions, (list, tuple)):
            exprs = list(expressions)
        else:
            exprs = [expressions]
        self.name = name
        self.expressions = [sympy.sympify(e) for e in exprs]
        self._compiled: Dict[tuple, Callable] = {}

    @property
    def n_components(self) -> int:
        return len(self.expressions)

    @property
    def is_vector(self) -> bool:
        return self.n_components == 2

    def __repr__(self) -> str:
        return f"AnalyticField({self.name!r}, {self.expressions})"

    def scaled(self, c: float) -> "AnalyticField":
        return AnalyticField(f"{c}*{self.name}", [c * e for e in self.expressions])

    def _derivative_fn(self, component: int, ax: int, ay: int) -> Callable:
        key = (component, ax, ay)
        if key not in self._compiled:
            expr = self.expressions[component]
            if ax:
                expr = sympy.diff(expr, X, ax)
            if ay:
                expr = sympy.diff(expr, Y, ay)
            self._compiled[key] = sympy.lambdify((X, Y), expr, "numpy")
        return self._compiled[key]

    def derivative(self, points: np.ndarray, ax: int = 0, ay: int = 0) -> np.ndarray:
        """d^(ax+ay) / dx^ax dy^ay of every component, shape (n, m)."""
        x, y = points[:, 0], points[:, 1]
        cols = []
        for c in range(self.n_components):
            raw = np.asarray(self._derivative_fn(c, ax, ay)(x, y), dtype=float)
            cols.append(np.broadcast_to(raw, x.shape))
        return np.column_stack(cols)

    # ── Derivative stacks ──────────────────────────────────────────

    def value(self, points: np.ndarray) -> np.ndarray:
        return self.derivative(points)

    def gradient(self, points: np.ndarray) -> np.ndarray:
        """(n, m, 2) with [.., i, j] = d_j u_i."""
        return np.stack([self.derivative(points, 1, 0), self.derivative(points, 0, 1)], axis=2)

    def hessian(self, points: np.ndarray) -> np.ndarray:
        dxx = self.derivative(points, 2, 0)
        dxy = self.derivative(points, 1, 1)
        dyy = self.derivative(points, 0, 2)
        return np.stack([np.stack([dxx, dxy], axis=2), np.stack([dxy, dyy], axis=2)], axis=2)

    def third(self, points: np.ndarray) -> np.ndarray:
        """(n, m, 2, 2, 2) fully symmetric third derivatives."""
        out = np.empty((len(points), self.n_components, 2, 2, 2))
        for a, b, c in itertools.product(range(2), repeat=3):
            ax = (a == 0) + (b == 0) + (c == 0)
            out[:, :, a, b, c] = self.derivative(points, ax, 3 - ax)
        return out

    def laplacian(self, points: np.ndarray) -> np.ndarray:
        return self.derivative(points, 2, 0) + self.derivative(points, 0, 2)

    def grad_sq_gradient(self, points: np.ndarray) -> np.ndarray:
        """Gradient of |grad u|^2, shape (n, 2)."""
        return 2.0 * np.einsum("nij,nijk->nk", self.gradient(points), self.hessian(points))

    def as_function(self) -> Callable[[np.ndarray], np.ndarray]:
        """Point function returning (n, 2) for vectors and (n,) for scalars."""
        if self.is_vector:
            return self.value
        return lambda points: self.value(points)[:, 0]

    def gradient_function(self) -> Callable[[np.ndarray], np.ndarray]:
        if self.is_vector:
            return self.gradient
        return lambda points: self.gradient(points)[:, 0, :]

    def sobolev_norm(self, rule: AnnulusRule, order: int) -> float:
        """H^order norm over the exact annulus, summing all multi-indices |a| <= order."""
        total = 0.0
        for k in range(order + 1):
            for ax in range(k + 1):
                d = self.derivative(rule.points, ax, k - ax)
                total += float(np.dot(rule.weights, np.sum(d ** 2, axis=1)))
        return float(np.sqrt(total))


def zero_field(n_components: int = 2) -> AnalyticField:
    return AnalyticField("zero", [0] * n_components)


def analytic_suite() -> Dict[str, AnalyticField]:
    r2 = X ** 2 + Y ** 2
    return {
        "constant": AnalyticField("constant", [sympy.Integer(1), sympy.Rational(-1, 2)]),
        "rigid_rotation": AnalyticField("rigid_rotation", [-Y, X]),
        "harmonic": AnalyticField("harmonic", [X / r2, Y / r2]),
        "trigonometric": AnalyticField("trigonometric", [sympy.sin(X) * sympy.cos(Y), -sympy.cos(X) * sympy.sin(Y)]),
    }


# ── Manufactured Stokes solutions ──────────────────────────────────

@dataclass
class ManufacturedStokes:
    velocity: AnalyticField
    pressure: AnalyticField

    @classmethod
    def from_stream_function(cls, psi: Expression = None, p: Expression = None) -> "ManufacturedStokes":
        if psi is None:
            psi = sympy.sin(sympy.pi * X) * sympy.sin(sympy.pi * Y)
        if p is None:
            p = sympy.cos(sympy.pi * X) * sympy.cos(sympy.pi * Y)
        u = [sympy.diff(psi, Y), -sympy.diff(psi, X)]
        return cls(AnalyticField("manufactured_velocity", u), AnalyticField("manufactured_pressure", p))

    def body_force(self, points: np.ndarray) -> np.ndarray:
        """-Laplace(u) + grad(p)."""
        return -self.velocity.laplacian(points) + self.pressure.gradient(points)[:, 0, :]

    def traction(self, points: np.ndarray, normals: np.ndarray) -> np.ndarray:
        """du/dn - p n."""
        dudn = np.einsum("nij,nj->ni", self.velocity.gradient(points), normals)
        return dudn - self.pressure.value(points) * normals

    def robin_data(self, q: float) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
        def rho0(points: np.ndarray, normals: np.ndarray) -> np.ndarray:
            return self.traction(points, normals) + q * self.velocity.value(points)
        return rho0
