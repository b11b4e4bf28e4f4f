"""Configuration handling for the HP-ALF lab."""

from functools import lru_cache
from typing import Literal

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Process-wide configuration loaded from environment variables."""

    threads: int = 1
    precision: Literal["float32", "float64"] = "float32"
    database_url: str = "sqlite:///./hpalf_runs.db"
    run_dir: str = "./runs"
    log_level: str = "INFO"
    deterministic: bool = True
    registry_enabled: bool = True

    model_config = SettingsConfigDict(
        env_prefix="HPALF_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
    )


@lru_cache
def get_settings() -> Settings:
    """Return cached Settings instance."""
    return Settings()
