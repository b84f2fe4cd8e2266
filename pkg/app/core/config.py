from typing import Optional
from pydantic import Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    API_V1_STR: str = "/api/v1"
    PROJECT_NAME: str = "Robin Stokes Inverse Toolkit"
    VERSION: str = "0.3.0"

    # Experiment runs: only these two are read from the environment
    OUTPUT_DIR: Optional[str] = Field(default=None, validation_alias="ROBIN_OUTPUT_DIR")
    THREADS: int = Field(default=1, validation_alias="ROBIN_THREADS")

    # Numerical defaults
    DEFAULT_TOL: float = 1e-10
    DEFAULT_EIGEN_COUNT: int = 30
    DEFAULT_OUTPUT_DIR: str = "runs"

    LOG_LEVEL: str = "INFO"

    model_config = SettingsConfigDict(
        case_sensitive=True,
        env_file=".env",
        extra="ignore",
        populate_by_name=True,
    )

    @field_validator("THREADS", mode="before")
    @classmethod
    def at_least_one_thread(cls, v):
        if v in (None, ""):
            return 1
        v = int(v)
        if v < 1:
            raise ValueError("THREADS must be >= 1")
        return v


settings = Settings()
