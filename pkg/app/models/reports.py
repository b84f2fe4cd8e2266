from pydantic import BaseModel
from typing import Any, Dict, List, Optional


class EnergyEstimateReport(BaseModel):
    h: float
    h1_norm: float
    data_norm: float
    ratio: float


class IsometryReport(BaseModel):
    max_relative_deviation: float
    deviations: List[float]


class DecayReport(BaseModel):
    slope: float
    mu: float
    lambda1: float
    decades: float
    window_start: float
    window_end: float
    samples_used: int


class BoundReport(BaseModel):
    s_star: float
    value: float
    asymptotic: float


class TraceQuantities(BaseModel):
    A: float
    B: float
    surrogate: bool = False


class WeightConstants(BaseModel):
    lam: float
    s: float
    k: float
    theta: float
    radial: bool
    theta_closed_form: Optional[float] = None


class LogLawFit(BaseModel):
    C: float
    C1: float
    exponent: float
    exponent_fixed: bool
    residual: float
    r_squared: float
    C_envelope: float
    n_records: int
    excluded: List[int] = []


class IdentifiabilityReport(BaseModel):
    B_values: List[float]
    min_B: float
    threshold: float
    all_distinct: bool


class RunSummary(BaseModel):
    subcommand: str
    config_hash: str
    output_dir: str
    artifacts: List[str]
    results: Dict[str, Any] = {}
