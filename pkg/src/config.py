"""Runtime configuration.

Numeric defaults live here so they can be tuned through ``CRB_*`` environment
variables or a ``.env`` file in the project root without touching code.
"""
from functools import lru_cache
from pathlib import Path

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict

root_dir = Path(__file__).resolve().parent.parent


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_prefix="CRB_",
        env_file=root_dir / ".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    # sample spaces
    grid_nodes: int = Field(2001, ge=3)
    grid_sigmas: float = Field(10.0, gt=0)
    poisson_tail_mass: float = Field(1e-12, gt=0, le=1e-12)
    normalization_tol: float = 1e-9
    table_normalization_tol: float = 1e-6
    max_exact_dimension: int = 4
    max_exact_points: int = 5_000_000

    # derivatives
    fd_relative_step: float = Field(1e-5, gt=0)
    fd_max_shrinks: int = 2
    density_floor: float = 1e-300
    # exact sums drop points whose density is below this; FD stencils on the rest stay above density_floor
    support_floor: float = 1e-250

    # information matrix
    pd_relative_threshold: float = 1e-10
    inverse_check_tol: float = 1e-8
    condition_warning: float = 1e8

    # estimation
    bias_tol: float = 1e-8
    slack_tol: float = 1e-7
    probe_points: int = Field(5, ge=5)
    mc_margin_sigmas: float = 3.0
    mc_min_samples: int = 1000
    mc_verify_min_samples: int = 10_000
    mc_workers: int = Field(1, ge=1)

    log_level: str = "WARNING"


@lru_cache
def get_settings() -> Settings:
    return Settings()
