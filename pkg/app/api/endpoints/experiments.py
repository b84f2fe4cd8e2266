from typing import Any, List, Optional
from fastapi import APIRouter, Body, Depends, Query
from app.api.deps import get_threads, valid_subcommand
from app.models.experiment import ExperimentConfig
from app.models.reports import RunSummary
from app.services import experiment_service

router = APIRouter()


@router.get("/subcommands", response_model=List[str])
def list_subcommands() -> Any:
    return list(experiment_service.SUBCOMMANDS)


@router.post("/{subcommand}", response_model=RunSummary)
def run_subcommand(
    subcommand: str = Depends(valid_subcommand),
    config: Optional[ExperimentConfig] = Body(default=None),
    seed: Optional[int] = Query(default=None, ge=0),
    threads: int = Depends(get_threads),
) -> Any:
    """Run one experiment stage synchronously and return its run summary."""
    return experiment_service.run_experiment(subcommand, config or ExperimentConfig(), threads=threads, seed=seed)
