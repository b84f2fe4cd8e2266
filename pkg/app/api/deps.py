from fastapi import HTTPException, status
from app.core.config import settings
from app.services.experiment_service import SUBCOMMANDS


def valid_subcommand(subcommand: str) -> str:
    if subcommand not in SUBCOMMANDS:
        raise HTTPException(
            status_code=status.HTTP_404_NOT_FOUND,
            detail=f"Unknown subcommand {subcommand!r}",
        )
    return subcommand


def get_threads() -> int:
    return settings.THREADS
