"""
Evolution Stokes problem: implicit-Euler Galerkin stepping and the spectral
propagator (steady state + semigroup + Duhamel term), plus decay-rate fits.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Union

import numpy as np
import pandas as pd

from app.core.errors import (
    InsufficientDecayError,
    PreconditionError,
    SolverConvergenceError,
    StepFailureError,
)
from app.core.quadrature import composite_gauss
from app.models.fields import BoundaryFunction, DiscreteField, DofSpace, FieldKind, PointFunction, RobinField
from app.models.geometry import BoundaryTag
from app.models.reports import DecayReport
from app.services import assembly_service as fem
from app.services.measurement_service import BoundaryMeasurement, extract_measurement
from app.services.spectral_service import EigenSystem
from app.services.stationary_service import (
    StationaryProblem,
    StationarySolution,
    factorize_stationary,
    solve_stationary,
)

logger = logging.getLogger(__name__)


# ── Boundary fluxes ────────────────────────────────────────────────

def _as_point_function(value: Union[float, PointFunction]) -> PointFunction:
    if callable(value):
        return value
    return lambda points: np.full(len(points), float(value))


def normal_profile(fn: Union[float, PointFunction]) -> BoundaryFunction:
    """Scalar profile k(x) turned into the boundary vector k(x) n."""
    fn = _as_point_function(fn)
    return lambda points, normals: np.asarray(fn(points), dtype=float)[:, None] * normals


@dataclass(frozen=True)
class ConstantFlux:
    g: Optional[BoundaryFunction]

    def at(self, t: float) -> Optional[BoundaryFunction]:
        return self.g


@dataclass(frozen=True)
class SeparableFlux:
    """kappa(t, x) n on Γe with kappa = h(x) + omega(t) rho(x)."""
    h: Union[float, PointFunction]
    rho: Union[float, PointFunction]
    omega: Callable[[float], float]
    omega_prime: Callable[[float], float]

    @classmethod
    def exponential(cls, h, rho, theta: float) -> "SeparableFlux":
        if not theta > 0.0:
            raise PreconditionError(f"decay rate theta must be positive, got {theta}")
        return cls(h, rho, lambda t: math.exp(-theta * t), lambda t: -theta * math.exp(-theta * t))

    @property
    def limit(self) -> BoundaryFunction:
        return normal_profile(self.h)

    @property
    def increment(self) -> BoundaryFunction:
        return normal_profile(self.rho)

    def at(self, t: float) -> BoundaryFunction:
        h, rho = _as_point_function(self.h), _as_point_function(self.rho)
        w = self.omega(t)
        return normal_profile(lambda x: h(x) + w * rho(x))


Flux = Union[ConstantFlux, SeparableFlux]


# ── Problem and trajectory ─────────────────────────────────────────

def time_grid(T: float, dt: float, n: int = 40, kind: str = "geometric") -> np.ndarray:
    """Sample times in (0, T] snapped to multiples of dt; T is always included."""
    n_steps = int(round(T / dt))
    if n_steps < 1:
        raise PreconditionError(f"horizon T={T} shorter than one step dt={dt}")
    if kind == "geometric":
        raw = np.geomspace(1.0, n_steps, max(n, 2))
    elif kind == "uniform":
        raw = np.linspace(1.0, n_steps, max(n, 2))
    else:
        raise PreconditionError(f"unknown time grid kind {kind!r}")
    steps = np.unique(np.clip(np.round(raw).astype(int), 1, n_steps))
    return steps * dt


@dataclass
class EvolutionProblem:
    space: DofSpace
    q: RobinField
    u0: DiscreteField
    flux: Flux
    T: float
    dt: float
    sample_times: Optional[np.ndarray] = None
    grid_kind: str = "geometric"
    n_samples: int = 40

    def __post_init__(self):
        if not self.dt > 0.0:
            raise PreconditionError(f"time step must be positive, got {self.dt}")
        if self.T < self.dt:
            raise PreconditionError(f"horizon T={self.T} must be >= dt={self.dt}")
        if self.u0.kind != FieldKind.VELOCITY:
            raise PreconditionError("initial data must be a velocity field")
        div = fem.assemble_divergence(self.space) @ self.u0.coefficients
        scale = max(1.0, float(np.linalg.norm(self.u0.coefficients)))
        if np.linalg.norm(div) > 1e-10 * scale:
            raise PreconditionError(
                f"initial velocity is not discretely divergence-free (|Du0|={np.linalg.norm(div):.3e})"
            )

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))

    def times(self) -> np.ndarray:
        if self.sample_times is not None:
            times = np.asarray(self.sample_times, dtype=float)
            if np.any(np.diff(times) <= 0.0) or times[0] <= 0.0 or times[-1] > self.T + 1e-12:
                raise PreconditionError("sample times must be strictly increasing within (0, T]")
            return np.round(times / self.dt) * self.dt
        return time_grid(self.T, self.dt, self.n_samples, self.grid_kind)


@dataclass
class TrajectorySample:
    time: float
    u: DiscreteField
    p: DiscreteField


@dataclass
class Trajectory:
    times: np.ndarray
    velocities: List[DiscreteField]
    pressures: List[DiscreteField]
    measurements: List[BoundaryMeasurement]
    l2_energy: np.ndarray       # ||u(t)||^2 at samples
    dissipation: np.ndarray     # cumulative integral of ||grad u||^2 up to each sample
    energy_sup: float           # sup over all steps of ||u||^2
    method: str
    mass: object = field(repr=False, default=None)
    truncation_warning: bool = False

    def __len__(self) -> int:
        return len(self.times)

    def sample(self, i: int) -> TrajectorySample:
        return TrajectorySample(float(self.times[i]), self.velocities[i], self.pressures[i])

    def distances(self, v: DiscreteField) -> np.ndarray:
        out = []
        for u in self.velocities:
            d = u.coefficients - v.coefficients
            out.append(math.sqrt(max(float(d @ (self.mass @ d)), 0.0)))
        return np.array(out)

    def summary_table(self, v: DiscreteField) -> pd.DataFrame:
        return pd.DataFrame({
            "t": self.times,
            "l2_dist_to_stationary": self.distances(v),
            "energy": self.l2_energy,
            "boundary_B": [m.B for m in self.measurements],
        })


def energy_functional(traj: Trajectory) -> float:
    """sup_n ||u^n||^2 + sum_n dt ||grad u^n||^2."""
    return float(traj.energy_sup + traj.dissipation[-1])


# ── Implicit Euler ─────────────────────────────────────────────────

def _load_function(space: DofSpace, flux: Flux) -> Callable[[float], np.ndarray]:
    if isinstance(flux, SeparableFlux):
        b_h = fem.assemble_neumann_load(space, flux.limit)
        b_rho = fem.assemble_neumann_load(space, flux.increment)
        return lambda t: b_h + flux.omega(t) * b_rho
    b = fem.assemble_neumann_load(space, flux.g)
    return lambda t: b


def step_implicit_euler(problem: EvolutionProblem, tol: float = 1e-10) -> Trajectory:
    space, dt = problem.space, problem.dt
    fact = factorize_stationary(space, problem.q, mass_shift=1.0 / dt)
    M, A = fact.mass, fact.stiffness
    load = _load_function(space, problem.flux)
    times = problem.times()
    sample_steps = {int(round(t / dt)): i for i, t in enumerate(times)}

    u = problem.u0.coefficients.copy()
    energy_sup = float(u @ (M @ u))
    dissipation = 0.0
    velocities, pressures, measurements, l2, diss = [], [], [], [], []
    logger.info(f"Implicit Euler: {problem.n_steps} steps of dt={dt:g}, {len(times)} samples")
    for n in range(1, problem.n_steps + 1):
        t = n * dt
        try:
            u, p, _, _ = fact.solve(M @ u / dt + load(t), tol)
        except SolverConvergenceError as e:
            logger.error(f"Step {n} failed at t={t:g}")
            raise StepFailureError(n, e.residual) from e
        energy = float(u @ (M @ u))
        energy_sup = max(energy_sup, energy)
        dissipation += dt * float(u @ (A @ u))
        if n in sample_steps:
            uf = DiscreteField(space, FieldKind.VELOCITY, u.copy())
            pf = DiscreteField(space, FieldKind.PRESSURE, p.copy())
            velocities.append(uf)
            pressures.append(pf)
            measurements.append(extract_measurement(uf, pf, time=t))
            l2.append(energy)
            diss.append(dissipation)

    return Trajectory(
        times=np.array(sorted(sample_steps)) * dt,
        velocities=velocities,
        pressures=pressures,
        measurements=measurements,
        l2_energy=np.array(l2),
        dissipation=np.array(diss),
        energy_sup=energy_sup,
        method="implicit_euler",
        mass=M,
    )


# ── Spectral propagator ────────────────────────────────────────────

def _duhamel_coefficients(es: EigenSystem, omega_prime: Callable[[float], float], t: float, dt: float) -> np.ndarray:
    """I_l(t) = integral_0^t exp(-(t-s) lambda_l) omega'(s) ds by composite 4-point Gauss."""
    if t <= 0.0:
        return np.zeros(es.count)
    s, w = composite_gauss(0.0, t, int(round(t / dt)), order=4)
    ws = w * np.array([omega_prime(si) for si in s])
    return np.exp(-np.outer(es.eigenvalues, t - s)) @ ws


def propagate_spectral(
    problem: EvolutionProblem,
    es: EigenSystem,
    stationary: Optional[StationarySolution] = None,
    tol: float = 1e-10,
) -> Trajectory:
    space, flux = problem.space, problem.flux
    fact = factorize_stationary(space, problem.q)
    X, lam, Pi = es.vectors, es.eigenvalues, es.pressures
    times = problem.times()

    if isinstance(flux, SeparableFlux):
        v = stationary or solve_stationary(StationaryProblem(space, problem.q, g=flux.limit), tol, fact)
        Y = solve_stationary(StationaryProblem(space, problem.q, g=flux.increment), tol, fact)
        c_y = es.coefficients(Y.u)
        w0 = problem.u0 - v.u - flux.omega(0.0) * Y.u
    else:
        v = stationary or solve_stationary(StationaryProblem(space, problem.q, g=flux.g), tol, fact)
        Y, c_y = None, None
        w0 = problem.u0 - v.u

    b = es.coefficients(w0)
    residual = es.projection_residual(w0)
    warn = residual > 0.01
    if warn:
        logger.warning(f"Spectral propagation is truncation-dominated: projection residual {residual:.2%}")

    velocities, pressures, measurements, l2, rate = [], [], [], [], []
    for t in times:
        coeff = np.exp(-lam * t) * b
        u = v.u.coefficients + X @ coeff
        p = v.p.coefficients + Pi @ coeff
        if Y is not None:
            a = -c_y * _duhamel_coefficients(es, flux.omega_prime, t, problem.dt)
            w = flux.omega(t)
            u = u + w * Y.u.coefficients + X @ a
            p = p + w * Y.p.coefficients + Pi @ a
        uf = DiscreteField(space, FieldKind.VELOCITY, u)
        pf = DiscreteField(space, FieldKind.PRESSURE, p)
        velocities.append(uf)
        pressures.append(pf)
        measurements.append(extract_measurement(uf, pf, time=float(t)))
        l2.append(float(u @ (es.mass @ u)))
        rate.append(float(u @ (fact.stiffness @ u)))

    # dissipation integrated over the sample grid (trapezoid, starting at t=0)
    u0 = problem.u0.coefficients
    t_all = np.concatenate([[0.0], times])
    r_all = np.concatenate([[float(u0 @ (fact.stiffness @ u0))], rate])
    dissipation = np.concatenate([[0.0], np.cumsum(0.5 * (r_all[1:] + r_all[:-1]) * np.diff(t_all))])[1:]
    return Trajectory(
        times=np.asarray(times),
        velocities=velocities,
        pressures=pressures,
        measurements=measurements,
        l2_energy=np.array(l2),
        dissipation=dissipation,
        energy_sup=max([float(u0 @ (es.mass @ u0))] + l2),
        method="spectral",
        mass=es.mass,
        truncation_warning=warn,
    )


# ── Lifting and decay diagnostics ──────────────────────────────────

def lifting_solve(space: DofSpace, data: Union[float, PointFunction]) -> DiscreteField:
    """Discrete harmonic field with the given trace on Γe and zero trace on Γ0."""
    return fem.solve_scalar_dirichlet(space, 0.0, {BoundaryTag.GAMMA_E: data, BoundaryTag.GAMMA_0: 0.0})


def measure_decay_rate(
    traj: Trajectory,
    v: StationarySolution,
    es: Optional[EigenSystem] = None,
    tail_fraction: float = 0.5,
    floor: float = 1e-11,
) -> DecayReport:
    """Least-squares slope of ln ||u(t) - v||_L2 against t over the tail window."""
    d = traj.distances(v.u)
    t = traj.times
    d_max = float(d.max()) if len(d) else 0.0
    valid = d > max(floor * d_max, 1e-300)
    if d_max == 0.0 or valid.sum() < 3:
        raise InsufficientDecayError("trajectory has no measurable distance to the stationary state")
    tv, dv = t[valid], d[valid]
    decades = math.log10(dv.max() / dv.min())
    if decades < 2.0:
        raise InsufficientDecayError(f"distance decays over only {decades:.2f} decades (need 2)")
    start = tv[0] + (1.0 - tail_fraction) * (tv[-1] - tv[0])
    window = tv >= start
    if window.sum() < 3:
        window = np.zeros_like(window)
        window[-3:] = True
    slope = float(np.polyfit(tv[window], np.log(dv[window]), 1)[0])
    mu = es.mu if es is not None else math.nan
    lam1 = float(es.eigenvalues[0]) if es is not None else math.nan
    logger.info(f"Decay slope {slope:.6g} (lambda_1={lam1:.6g}, mu={mu:.6g}) over {decades:.1f} decades")
    return DecayReport(
        slope=slope,
        mu=mu,
        lambda1=lam1,
        decades=decades,
        window_start=float(tv[window][0]),
        window_end=float(tv[window][-1]),
        samples_used=int(window.sum()),
    )


def hypothesis_terms(space: DofSpace, flux: SeparableFlux, mu: float, times, dt: float) -> pd.DataFrame:
    """Deviation, rate and convolution terms of the time-dependent flux hypothesis.

    Γe norms are L2 norms of the profile rho (the H^(3/2) norm is not computed).
    """
    points, weights, normals, _ = fem.boundary_quadrature(space, BoundaryTag.GAMMA_E)
    rho = np.asarray(_as_point_function(flux.rho)(points), dtype=float)
    rho_norm = float(np.sqrt(np.dot(weights, rho ** 2)))
    rows = []
    for t in np.asarray(times, dtype=float):
        if t > 0.0:
            s, w = composite_gauss(0.0, t, max(1, int(round(t / dt))), order=4)
            conv = float(np.sum(w * np.exp(-mu * (t - s)) * np.array([flux.omega_prime(si) ** 2 for si in s])))
        else:
            conv = 0.0
        rows.append({
            "t": t,
            "deviation": abs(flux.omega(t)) * rho_norm,
            "rate": abs(flux.omega_prime(t)) * rho_norm,
            "convolution": math.sqrt(conv) * rho_norm,
        })
    return pd.DataFrame(rows)
