from fastapi import APIRouter
from app.api.endpoints import experiments

api_router = APIRouter()
api_router.include_router(experiments.router, prefix="/experiments", tags=["experiments"])


@api_router.get("/health")
def health_check():
    return {"status": "ok"}
