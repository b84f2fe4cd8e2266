"""
Experiment runner shared by the CLI and the HTTP API.

Each subcommand builds meshes from the validated config, runs the numerical
services and writes its artifacts through an ArtifactWriter. A failure
leaves a PARTIAL_RUN marker naming the stage that failed.
"""

import json
import math
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
import pandas as pd
from pydantic import ValidationError

from app.core.config import settings
from app.core.errors import ConfigError, FluxTooSmallError, InsufficientDecayError, InvariantViolation
from app.core.quadrature import annulus_rule
from app.models.experiment import ExperimentConfig
from app.models.fields import DofSpace, RobinField
from app.models.geometry import BoundaryTag
from app.models.reports import RunSummary
from app.services import assembly_service as fem
from app.services import mesh_service
from app.services.analytic_fields import ManufacturedStokes, analytic_suite, zero_field
from app.services.carleman_service import (
    build_weights,
    carleman_sweep,
    theoretical_bound,
    trace_quantities,
    violations,
)
from app.services.evolution_service import (
    ConstantFlux,
    EvolutionProblem,
    SeparableFlux,
    energy_functional,
    hypothesis_terms,
    measure_decay_rate,
    propagate_spectral,
    step_implicit_euler,
)
from app.services.export_service import ArtifactWriter, config_hash, read_artifact_csv
from app.services.inverse_service import (
    TwinExperiment,
    contrast_sweep,
    evolution_stability_sweep,
    fit_log_law,
    identifiability_experiment,
    reconstruct_q_difference,
    recover_constant_q,
    stability_sweep,
)
from app.services.spectral_service import build_eigensystem, eigenvalue_table, isometry_check
from app.services.stationary_service import (
    StationaryProblem,
    convergence_study,
    energy_estimate_check,
    energy_ratios_stable,
    normal_flux,
    observed_orders,
    solve_stationary,
)

logger = logging.getLogger(__name__)


@dataclass
class RunContext:
    config: ExperimentConfig
    writer: ArtifactWriter
    threads: int = 1
    seed: int = 0
    stage: str = "setup"
    _meshes: Optional[list] = field(default=None, repr=False)

    def meshes(self):
        if self._meshes is None:
            self.stage = "mesh"
            geometry = self.config.geometry
            spec = mesh_service.annulus_spec(geometry.R0, geometry.R1, geometry.h)
            hierarchy = mesh_service.refinement_hierarchy(spec, geometry.refinements)
            self._meshes = [mesh_service.validate_mesh(m) for m in hierarchy]
        return self._meshes

    def spaces(self) -> List[DofSpace]:
        return [DofSpace(m) for m in self.meshes()]

    def finest(self) -> DofSpace:
        return DofSpace(self.meshes()[-1])


# ── Config loading ─────────────────────────────────────────────────

def parse_config(payload: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(payload)
    except ValidationError as e:
        raise ConfigError(f"invalid experiment config: {e}") from e


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    return parse_config(payload)


# ── Helpers ────────────────────────────────────────────────────────

def _rigid_rotation(points: np.ndarray) -> np.ndarray:
    return np.column_stack([-points[:, 1], points[:, 0]])


def _has_exact_rigid_solution(config: ExperimentConfig) -> bool:
    return (
        config.flux.kind == "rigid_rotation"
        and config.robin.kind == "constant"
        and abs(config.robin.value - 1.0 / config.geometry.R0) <= 1e-12 * config.robin.value
    )


def _problem_for(config: ExperimentConfig, space: DofSpace, q: RobinField) -> StationaryProblem:
    if config.flux.kind == "manufactured":
        ms = ManufacturedStokes.from_stream_function()
        return StationaryProblem(space, q, g=ms.traction, f=ms.body_force, rho0=ms.robin_data(config.robin.value))
    return StationaryProblem(space, q, g=config.flux.boundary_function(config.geometry.R1))


def _clean(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


# ── Subcommands ────────────────────────────────────────────────────

def run_mesh(ctx: RunContext) -> dict:
    rows = []
    for mesh in ctx.meshes():
        rows.append(mesh_service.mesh_summary(mesh))
        ctx.writer.write_vtk(f"mesh/mesh_level{mesh.level}.vtk", mesh)
    ctx.writer.write_csv("mesh/mesh_levels.csv", pd.DataFrame(rows))
    return {"levels": len(rows), "finest": rows[-1]}


def run_solve_stationary(ctx: RunContext) -> dict:
    config = ctx.config
    ctx.stage = "solve-stationary"
    exact_rigid = _has_exact_rigid_solution(config)
    ms = ManufacturedStokes.from_stream_function() if config.flux.kind == "manufactured" else None
    reports = []
    last = {}

    def measure(space: DofSpace) -> dict:
        q = config.robin.build(space.mesh)
        problem = _problem_for(config, space, q)
        sol = solve_stationary(problem, config.solver.tol)
        report = energy_estimate_check(sol, problem)
        reports.append(report)
        last["space"], last["sol"] = space, sol
        row = {
            "velocity_l2": fem.l2_norm(sol.u),
            "velocity_h1": fem.h1_norm(sol.u),
            "pressure_l2": fem.l2_norm(sol.p),
            "energy_ratio": report.ratio,
            "flux_balance": normal_flux(sol.u, BoundaryTag.GAMMA_E) + normal_flux(sol.u, BoundaryTag.GAMMA_0),
            "relative_residual": sol.relative_residual,
        }
        if exact_rigid:
            a = config.flux.amplitude
            row["velocity_l2_error"] = fem.l2_error(sol.u, lambda x: a * _rigid_rotation(x))
        if ms is not None:
            row["velocity_l2_error"] = fem.l2_error(sol.u, ms.velocity.as_function())
            row["velocity_h1_error"] = fem.h1_seminorm_error(sol.u, ms.velocity.gradient_function())
            row["pressure_l2_error"] = fem.l2_error(sol.p, ms.pressure.as_function())
        return row

    table = convergence_study(ctx.spaces(), measure)
    ctx.writer.write_csv("stationary/convergence.csv", table)
    ctx.writer.write_vtk("stationary/solution.vtk", last["space"].mesh, [last["sol"].u, last["sol"].p], ["velocity", "pressure"])
    results = {
        "energy_ratio_stable": energy_ratios_stable(reports),
        "finest": _jsonable(table.iloc[-1].to_dict()),
    }
    ctx.writer.write_json("stationary/summary.json", results)
    return results


def run_eigs(ctx: RunContext) -> dict:
    config = ctx.config
    space = ctx.finest()
    ctx.stage = "eigs"
    q = config.robin.build(space.mesh)
    es = build_eigensystem(space, q, config.solver.eigen_count)
    iso = isometry_check(es)
    ctx.writer.write_csv("eigs/eigenvalues.csv", eigenvalue_table(es))
    ctx.writer.write_vtk("eigs/eigenfield_1.vtk", space.mesh, [es.eigenfield(0)], ["phi_1"])
    ctx.writer.write_matrix("eigs/stiffness.mtx", es.stiffness)
    ctx.writer.write_matrix("eigs/mass.mtx", es.mass)
    results = {
        "count": es.count,
        "lambda_1": float(es.eigenvalues[0]),
        "mu": es.mu,
        "orthonormality_error": es.orthonormality_error,
        "rayleigh_error": es.rayleigh_error,
        "isometry_max_deviation": iso.max_relative_deviation,
    }
    ctx.writer.write_json("eigs/summary.json", results)
    return results


def run_solve_evolution(ctx: RunContext) -> dict:
    config = ctx.config
    space = ctx.finest()
    ctx.stage = "solve-evolution"
    q = config.robin.build(space.mesh)
    es = build_eigensystem(space, q, config.solver.eigen_count)

    if config.flux.kind == "exponential":
        theta = config.flux.theta or 2.0 * es.mu
        flux = SeparableFlux.exponential(config.flux.amplitude, config.flux.rho_amplitude, theta)
        v = solve_stationary(StationaryProblem(space, q, g=flux.limit), config.solver.tol)
    else:
        flux = ConstantFlux(config.flux.boundary_function(config.geometry.R1))
        v = solve_stationary(StationaryProblem(space, q, g=flux.g), config.solver.tol)

    initial = config.time.initial
    if initial == "zero":
        u0 = fem.interpolate_velocity(space, lambda x: np.zeros_like(x))
    elif initial == "rigid_rotation":
        u0 = fem.interpolate_velocity(space, _rigid_rotation)
    else:
        u0 = v.u + es.eigenfield(0)
    problem = EvolutionProblem(
        space, q, u0, flux, config.time.T, config.time.dt,
        grid_kind=config.time.grid, n_samples=config.time.n_samples,
    )
    ctx.stage = "solve-evolution:implicit-euler"
    euler = step_implicit_euler(problem, config.solver.tol)
    ctx.stage = "solve-evolution:spectral"
    spectral = propagate_spectral(problem, es, stationary=v, tol=config.solver.tol)

    ctx.writer.write_csv("evolution/implicit_euler.csv", euler.summary_table(v.u))
    ctx.writer.write_csv("evolution/spectral.csv", spectral.summary_table(v.u))
    d = euler.velocities[-1] - spectral.velocities[-1]
    ref = es.l2_norm(spectral.velocities[-1])
    results = {
        "lambda_1": float(es.eigenvalues[0]),
        "mu": es.mu,
        "final_discrepancy": es.l2_norm(d) / ref if ref > 0.0 else 0.0,
        "energy_functional": energy_functional(euler),
        "truncation_warning": spectral.truncation_warning,
    }
    try:
        results["decay"] = measure_decay_rate(spectral, v, es).model_dump()
    except InsufficientDecayError as e:
        logger.warning(f"No decay rate fitted: {e}")
        results["decay"] = None
    if isinstance(flux, SeparableFlux):
        terms = hypothesis_terms(space, flux, es.mu, spectral.times, config.time.dt)
        ctx.writer.write_csv("evolution/hypothesis_terms.csv", terms)
    ctx.writer.write_json("evolution/summary.json", results)
    return results


def run_weights(ctx: RunContext) -> dict:
    config = ctx.config
    space = ctx.finest()
    ctx.stage = "weights"
    weight = build_weights(space, config.carleman.lambdas[0], config.carleman.s_values[0], config.carleman.chi)
    ctx.writer.write_vtk("weights/weights.vtk", space.mesh, [weight.psi0, weight.psi1], ["psi0", "psi1"])
    results = weight.constants().model_dump()
    if weight.radial is not None:
        rad = weight.radial
        results["psi0_l2_error"] = fem.l2_error(weight.psi0, lambda x: rad.psi0(np.hypot(x[:, 0], x[:, 1])))
    ctx.writer.write_json("weights/summary.json", results)
    return results


def run_carleman_check(ctx: RunContext) -> dict:
    config = ctx.config
    space = ctx.finest()
    ctx.stage = "carleman-check"
    suite = analytic_suite()
    fields = {name: suite[name] for name in config.carleman.fields}
    rule = annulus_rule(config.geometry.R0, config.geometry.R1)
    table = carleman_sweep(space, config.carleman.lambdas, config.carleman.s_values, fields,
                           config.carleman.chi, ctx.threads, rule)
    ctx.writer.write_csv("carleman/sweep.csv", table.drop(columns=["violation"]))

    weight = build_weights(space, config.carleman.lambdas[0], config.carleman.s_values[0], config.carleman.chi)
    tq = trace_quantities(suite["rigid_rotation"], zero_field(1), rule)
    bound = theoretical_bound(tq.A, tq.B, weight.k, config.carleman.dtilde)
    results = {
        "violations": int(table["violation"].sum()),
        "rows": len(table),
        "rigid_rotation_A": tq.A,
        "rigid_rotation_B": tq.B,
        "bound": bound.model_dump(),
    }
    ctx.writer.write_json("carleman/summary.json", _jsonable(results))
    if results["violations"]:
        bad = table[table["violation"]].iloc[0]
        raise InvariantViolation(
            f"{results['violations']} violations, first: field {bad['field_id']} lambda={bad['lambda']} s={bad['s']}",
            invariant="carleman_inequality",
        )
    return results


def run_invert(ctx: RunContext) -> dict:
    config = ctx.config
    inv = config.inverse
    ctx.stage = "invert"
    g = config.flux.boundary_function(config.geometry.R1)
    rows, constant_rows = [], []
    twin = None
    for space in ctx.spaces():
        q1 = RobinField.constant(space.mesh, inv.q1, config.robin.alpha)
        q2 = RobinField.constant(space.mesh, inv.q2, config.robin.alpha)
        twin = TwinExperiment(space, q1, q2, g, inv.m, config.solver.tol)
        truth_norm = twin.K.l2_norm(twin.truth)
        err = twin.noiseless_error()
        rows.append({
            "h": space.mesh.h,
            "K_measure": twin.K.measure,
            "K_fraction": len(twin.K.indices) / twin.K.n_total,
            "reconstruction_error": err / truth_norm if truth_norm > 0.0 else err,
        })
        try:
            q1_rec = recover_constant_q(twin.sol1, twin.sol2, inv.q2, inv.m1)
            constant_rows.append({"h": space.mesh.h, "q1_recovered": q1_rec, "q1_error": abs(q1_rec - inv.q1)})
        except FluxTooSmallError as e:
            logger.info(f"Constant-q recovery skipped: {e}")

    table = convergence_study_from_rows(rows, "reconstruction_error")
    ctx.writer.write_csv("inverse/twin_convergence.csv", table)
    if constant_rows:
        ctx.writer.write_csv("inverse/constant_q.csv", convergence_study_from_rows(constant_rows, "q1_error"))

    rec = reconstruct_q_difference(twin.sol1, twin.sol2, twin.q2, twin.K)
    angle = np.mod(np.arctan2(twin.K.points[:, 1], twin.K.points[:, 0]), 2.0 * np.pi)
    ctx.writer.write_csv("inverse/pointwise.csv", pd.DataFrame({"angle": angle, "reconstructed": rec.values, "truth": twin.truth}))

    results = {
        "finest_relative_error": rows[-1]["reconstruction_error"],
        "constant_q_recovered": constant_rows[-1]["q1_recovered"] if constant_rows else None,
    }
    if inv.identifiability_pairs > 0:
        ctx.stage = "invert:identifiability"
        report = identifiability_experiment(twin.space, g, inv.identifiability_pairs, ctx.seed,
                                            config.robin.alpha, config.solver.tol, ctx.threads)
        results["identifiability"] = report.model_dump()
    ctx.writer.write_json("inverse/summary.json", results)
    return results


def convergence_study_from_rows(rows: List[dict], error_column: str) -> pd.DataFrame:
    df = pd.DataFrame(rows)
    df[error_column.replace("_error", "_order")] = observed_orders(df["h"].tolist(), df[error_column].tolist())
    return df


def run_stability_curve(ctx: RunContext) -> dict:
    config = ctx.config
    inv = config.inverse
    space = ctx.finest()
    ctx.stage = "stability-curve"
    g = config.flux.boundary_function(config.geometry.R1)
    q1 = RobinField.constant(space.mesh, inv.q1, config.robin.alpha)
    q2 = RobinField.constant(space.mesh, inv.q1 + inv.sweep_delta, config.robin.alpha)
    twin = TwinExperiment(space, q1, q2, g, inv.m, config.solver.tol, noise_modes=inv.noise_modes)
    curve = stability_sweep(twin, inv.noise_levels, inv.trials, ctx.seed, ctx.threads)
    ctx.writer.write_csv("inverse/stability.csv", curve.records)
    results = {
        "floor": curve.floor,
        "fit": curve.fit.model_dump() if curve.fit else None,
        "median_error": [float(v) for v in curve.medians().to_numpy()],
        "mesh_h": space.mesh.h,
        "velocity_dofs": space.velocity_dof_count,
    }
    if inv.contrast_frequencies:
        ctx.stage = "stability-curve:contrast"
        contrast = contrast_sweep(space, q1, g, inv.m, inv.contrast_frequencies, inv.contrast_amplitude,
                                  inv.contrast_smoothness, config.solver.tol, ctx.threads)
        ctx.writer.write_csv("inverse/contrast.csv", contrast.records)
        results["contrast_fit"] = contrast.fit.model_dump()
        results["contrast_fixed_fit"] = contrast.fixed_fit.model_dump()
    if inv.evolution:
        ctx.stage = "stability-curve:evolution"
        evo = evolution_stability_sweep(twin, inv.noise_levels, inv.trials, ctx.seed, ctx.threads)
        ctx.writer.write_csv("inverse/stability_evolution.csv", evo.records)
        results["evolution_fit"] = evo.fit.model_dump() if evo.fit else None
        if curve.fit and evo.fit:
            results["C_relative_change"] = abs(evo.fit.C - curve.fit.C) / curve.fit.C
    ctx.writer.write_json("inverse/stability.json", results)
    return results


REPORT_FILES = ("report.csv", "report_files.csv")


def _refit(records: pd.DataFrame, exponent: Optional[float]):
    usable = records[records["B"] > 0.0]
    if exponent is None:
        usable = usable[usable["err_L2K"] > 0.0]
    if len(usable) < 2:
        return None
    return fit_log_law(usable["B"].to_numpy(), usable["err_L2K"].to_numpy(), exponent=exponent)


def key_results(out: Path) -> pd.DataFrame:
    """Headline numbers recomputed from whichever runner outputs exist under out."""
    rows = []

    def add(quantity: str, value, source: str):
        rows.append({"quantity": quantity, "value": float(value), "source": source})

    def table(rel: str) -> Optional[pd.DataFrame]:
        path = out / rel
        return read_artifact_csv(path) if path.exists() else None

    conv = table("stationary/convergence.csv")
    if conv is not None:
        for column in [c for c in conv.columns if c.endswith("_order")]:
            add(column, conv[column].iloc[-1], "stationary/convergence.csv")

    eigs = table("eigs/eigenvalues.csv")
    if eigs is not None:
        add("lambda_1", eigs["lambda"].iloc[0], "eigs/eigenvalues.csv")
        summary = out / "eigs" / "summary.json"
        mu = json.loads(summary.read_text()).get("mu") if summary.exists() else None
        if mu is not None:
            add("mu", mu, "eigs/summary.json")

    sweep = table("carleman/sweep.csv")
    if sweep is not None:
        add("carleman_violations", int(violations(sweep["lhs"], sweep["rhs"]).sum()), "carleman/sweep.csv")
        add("carleman_min_margin", sweep["margin"].min(), "carleman/sweep.csv")

    twin = table("inverse/twin_convergence.csv")
    if twin is not None and "reconstruction_order" in twin.columns:
        add("reconstruction_order", twin["reconstruction_order"].iloc[-1], "inverse/twin_convergence.csv")

    for rel, prefix, exponent in (
        ("inverse/stability.csv", "stability", 0.5),
        ("inverse/stability_evolution.csv", "evolution_stability", 0.5),
        ("inverse/contrast.csv", "contrast", None),
    ):
        records = table(rel)
        fit = _refit(records, exponent) if records is not None else None
        if fit is None:
            continue
        add(f"{prefix}_C", fit.C, rel)
        add(f"{prefix}_C1", fit.C1, rel)
        add(f"{prefix}_exponent", fit.exponent, rel)
        add(f"{prefix}_R2", fit.r_squared, rel)
    return pd.DataFrame(rows, columns=["quantity", "value", "source"])


def run_report(ctx: RunContext) -> dict:
    ctx.stage = "report"
    out = ctx.writer.out_dir
    files = []
    for path in sorted(out.rglob("*.csv")):
        rel = path.relative_to(out).as_posix()
        if rel in REPORT_FILES:
            continue
        df = read_artifact_csv(path)
        files.append({"file": rel, "rows": len(df), "columns": ";".join(map(str, df.columns))})
    if not files:
        raise ConfigError(f"no CSV artifacts found under {out}")
    summary = key_results(out)
    if summary.empty:
        logger.warning("No runner outputs with key results found; report lists files only")
    ctx.writer.write_csv("report.csv", summary)
    ctx.writer.write_csv("report_files.csv", pd.DataFrame(files))
    return {"files": len(files), "quantities": dict(zip(summary["quantity"], summary["value"]))}


RUNNERS: Dict[str, Callable[[RunContext], dict]] = {
    "mesh": run_mesh,
    "solve-stationary": run_solve_stationary,
    "solve-evolution": run_solve_evolution,
    "eigs": run_eigs,
    "weights": run_weights,
    "carleman-check": run_carleman_check,
    "invert": run_invert,
    "stability-curve": run_stability_curve,
    "report": run_report,
}

SUBCOMMANDS = tuple(RUNNERS)


def resolve_output_dir(config: ExperimentConfig, out_dir: Optional[str] = None) -> str:
    """CLI flag, then ROBIN_OUTPUT_DIR, then the config file, then the default."""
    return out_dir or settings.OUTPUT_DIR or config.output_dir or settings.DEFAULT_OUTPUT_DIR


def run_experiment(
    subcommand: str,
    config: ExperimentConfig,
    out_dir: Optional[str] = None,
    threads: Optional[int] = None,
    seed: Optional[int] = None,
) -> RunSummary:
    if subcommand not in RUNNERS:
        raise ConfigError(f"unknown subcommand {subcommand!r}; choose from {list(SUBCOMMANDS)}")
    if seed is not None:
        config = config.model_copy(update={"inverse": config.inverse.model_copy(update={"seed": int(seed)})})
    digest = config_hash(config.model_dump(mode="json"))
    writer = ArtifactWriter(resolve_output_dir(config, out_dir), digest)
    ctx = RunContext(config=config, writer=writer, threads=threads or settings.THREADS, seed=config.inverse.seed)
    writer.clear_marker()
    logger.info(f"Running {subcommand} (config {digest[:12]}) into {writer.out_dir}")
    try:
        results = RUNNERS[subcommand](ctx)
    except Exception as e:
        writer.mark_failed(ctx.stage, e)
        raise
    return RunSummary(
        subcommand=subcommand,
        config_hash=digest,
        output_dir=str(writer.out_dir),
        artifacts=list(writer.written),
        results=_jsonable(results),
    )


def _jsonable(value):
    """Plain JSON types with non-finite floats mapped to None."""
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (np.floating, float)):
        return _clean(float(value))
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value
