from typing import List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.models.fields import RobinField
from app.models.geometry import AnnulusSpec, Mesh

FIELD_SUITE = ("constant", "rigid_rotation", "harmonic", "trigonometric")


def _periodic_profile(values: List[float]):
    """Samples at equally spaced angles on [0, 2pi), linearly interpolated."""
    samples = np.asarray(values, dtype=float)
    angles = 2.0 * np.pi * np.arange(len(samples)) / len(samples)

    def profile(points: np.ndarray) -> np.ndarray:
        theta = np.mod(np.arctan2(points[:, 1], points[:, 0]), 2.0 * np.pi)
        return np.interp(theta, angles, samples, period=2.0 * np.pi)

    return profile


class ConfigBlock(BaseModel):
    """Unknown keys are errors at every level of the config."""
    model_config = ConfigDict(extra="forbid")


class GeometryConfig(ConfigBlock):
    R0: float = Field(0.5, gt=0.0)
    R1: float = Field(1.0, gt=0.0)
    h: float = Field(0.2, gt=0.0)
    refinements: int = Field(2, ge=0, le=5)

    @model_validator(mode="after")
    def check_annulus(self):
        AnnulusSpec(R0=self.R0, R1=self.R1, h=self.h)
        return self


class RobinConfig(ConfigBlock):
    kind: Literal["constant", "nodal"] = "constant"
    value: float = 2.0
    nodal_values: Optional[List[float]] = None
    alpha: float = Field(1.0, gt=0.0)
    bound: Optional[float] = None

    @model_validator(mode="after")
    def check_nodal(self):
        if self.kind == "nodal" and not self.nodal_values:
            raise ValueError("nodal Robin coefficient needs nodal_values")
        return self

    def build(self, mesh: Mesh):
        if self.kind == "constant":
            return RobinField.constant(mesh, self.value, self.alpha)
        return RobinField.from_function(mesh, _periodic_profile(self.nodal_values), self.alpha, self.bound)


class FluxConfig(ConfigBlock):
    kind: Literal["rigid_rotation", "radial", "custom_nodal", "manufactured", "exponential"] = "rigid_rotation"
    amplitude: float = 1.0
    nodal_values: Optional[List[float]] = None
    rho_amplitude: float = 1.0
    theta: Optional[float] = Field(None, gt=0.0)

    @model_validator(mode="after")
    def check_preset(self):
        if self.kind == "custom_nodal" and not self.nodal_values:
            raise ValueError("custom_nodal flux needs nodal_values")
        return self

    def boundary_function(self, R1: float):
        """Constant-in-time Γe data g(points, normals)."""
        a = self.amplitude
        if self.kind == "rigid_rotation":
            return lambda x, n: a * np.column_stack([-x[:, 1], x[:, 0]]) / R1
        if self.kind == "custom_nodal":
            profile = _periodic_profile(self.nodal_values)
            return lambda x, n: a * profile(x)[:, None] * n
        return lambda x, n: a * n


class SolverConfig(ConfigBlock):
    tol: float = Field(1e-10, gt=0.0)
    eigen_count: int = Field(30, ge=1)


class TimeConfig(ConfigBlock):
    dt: float = Field(1e-2, gt=0.0)
    T: float = Field(2.0, gt=0.0)
    grid: Literal["geometric", "uniform"] = "geometric"
    n_samples: int = Field(40, ge=2)
    initial: Literal["zero", "first_mode", "rigid_rotation"] = "first_mode"

    @model_validator(mode="after")
    def check_horizon(self):
        if self.T < self.dt:
            raise ValueError(f"horizon T={self.T} must be >= dt={self.dt}")
        return self


class CarlemanConfig(ConfigBlock):
    lambdas: List[float] = Field(default_factory=lambda: [2.0, 4.0], min_length=1)
    s_values: List[float] = Field(default_factory=lambda: [1.0, 2.0, 4.0, 8.0], min_length=1)
    fields: List[str] = Field(default_factory=lambda: list(FIELD_SUITE), min_length=1)
    chi: float = Field(1.0, gt=0.0)
    dtilde: float = Field(10.0, ge=1.0)

    @field_validator("lambdas")
    @classmethod
    def lambda_at_least_two(cls, v):
        if any(lam < 2.0 for lam in v):
            raise ValueError("every lambda must be >= 2")
        return v

    @field_validator("s_values")
    @classmethod
    def s_positive(cls, v):
        if any(s <= 0.0 for s in v):
            raise ValueError("every s must be positive")
        return v

    @field_validator("fields")
    @classmethod
    def known_fields(cls, v):
        unknown = [f for f in v if f not in FIELD_SUITE]
        if unknown:
            raise ValueError(f"unknown analytic fields {unknown}; available {list(FIELD_SUITE)}")
        return v


class InverseConfig(ConfigBlock):
    q1: float = Field(2.0, gt=0.0)
    q2: float = Field(2.1, gt=0.0)
    sweep_delta: float = Field(0.0, ge=0.0)
    m: float = Field(0.4, gt=0.0)
    m1: float = Field(0.1, gt=0.0)
    noise_levels: List[float] = Field(
        default_factory=lambda: [1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6], min_length=1
    )
    trials: int = Field(10, ge=1)
    seed: int = Field(0, ge=0)
    evolution: bool = False
    identifiability_pairs: int = Field(20, ge=0)
    noise_modes: int = Field(3, ge=1)
    contrast_frequencies: List[int] = Field(default_factory=lambda: list(range(2, 11)))
    contrast_amplitude: float = Field(1.0, gt=0.0)
    contrast_smoothness: float = Field(0.5, gt=0.0)

    @field_validator("noise_levels")
    @classmethod
    def nonnegative_levels(cls, v):
        if any(e < 0.0 for e in v):
            raise ValueError("noise levels must be nonnegative")
        return v

    @field_validator("contrast_frequencies")
    @classmethod
    def usable_frequencies(cls, v):
        if v and (len(set(v)) < 2 or min(v) < 1):
            raise ValueError("contrast sweep needs at least two distinct frequencies >= 1 (or none)")
        return v


class ExperimentConfig(ConfigBlock):
    geometry: GeometryConfig = Field(default_factory=GeometryConfig)
    robin: RobinConfig = Field(default_factory=RobinConfig)
    flux: FluxConfig = Field(default_factory=FluxConfig)
    solver: SolverConfig = Field(default_factory=SolverConfig)
    time: TimeConfig = Field(default_factory=TimeConfig)
    carleman: CarlemanConfig = Field(default_factory=CarlemanConfig)
    inverse: InverseConfig = Field(default_factory=InverseConfig)
    output_dir: Optional[str] = None
