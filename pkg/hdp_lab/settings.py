"""Application settings and configuration management using Pydantic Settings.

This module provides centralized configuration management for hdp-lab using Pydantic
Settings. Configuration is loaded from ~/.hdp_lab/.env file with support for
environment variable overrides.

Only process-level concerns live here (where outputs go, which device and how many
threads to use, how chatty the logs are). Experiment hyperparameters are validated
models of their own (`TrainConfig`, `UAPConfig`, `ProtocolSpec`) and are recorded in
each run's manifest.

Configuration File:
    On first import of hdp_lab, the package automatically creates ~/.hdp_lab/.env
    from the bundled .env.example template if it doesn't exist.

Environment Variable Overrides:
    All settings can be overridden using environment variables with uppercase names:
        - LOG_LEVEL: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
        - RUNS_LOCAL_PATH: Default output root for runs when --out is omitted
        - TORCH_NUM_THREADS: Intra-op thread count passed to torch.set_num_threads
        - DEVICE: Torch device string used for training and evaluation
        - PROGRESS_BAR: Show tqdm progress bars for epochs (true/false)
        - SWEEP_MAX_PARALLEL_TASKS: Worker processes for parallel sweeps
        - REPORT_WALL_TIMES: Copy per-stage wall times into report.json (true/false)

Typical Usage:
    >>> from hdp_lab.settings import get_settings
    >>>
    >>> settings = get_settings()
    >>> runs_root = settings.runs_local_path

Important Notes:
    - Settings are cached using @lru_cache in get_settings()
    - Changes to .env file or environment variables require restarting the Python process
    - Unknown settings in .env file are ignored (extra="ignore")
    - Filesystem paths support tilde expansion (~)
"""

from functools import lru_cache
from pydantic_settings import BaseSettings, SettingsConfigDict
from typing import Optional
from pathlib import Path


class Settings(BaseSettings):
    """Application configuration settings loaded from ~/.hdp_lab/.env file.

    Attributes:
        log_level: Logging level for the application. Valid values: 'DEBUG', 'INFO',
            'WARNING', 'ERROR', 'CRITICAL'. Defaults to 'WARNING'.
        runs_local_path: Output root used by the CLI when --out is not given.
            Supports tilde expansion (~). Defaults to '~/.hdp_lab/runs'.
        torch_num_threads: Intra-op thread count for torch. Defaults to None
            (torch decides).
        device: Torch device string. Defaults to 'cpu'.
        progress_bar: Show tqdm epoch progress bars. Defaults to False.
        sweep_max_parallel_tasks: Maximum worker processes when a sweep runs in
            parallel mode. Defaults to 4.
        report_wall_times: Fill report.json per_stage_seconds with measured wall
            times. Off by default so same-seed reports differ only in timestamp;
            the times are always in stages/*.json. Defaults to False.
    """
    model_config = SettingsConfigDict(
        env_file=str(Path.home() / ".hdp_lab" / ".env"),
        env_file_encoding="utf-8",
        extra="ignore"
    )

    log_level: str = "WARNING"

    runs_local_path: Optional[str] = "~/.hdp_lab/runs"

    torch_num_threads: Optional[int] = None
    device: str = "cpu"
    progress_bar: bool = False

    sweep_max_parallel_tasks: int = 4
    report_wall_times: bool = False


@lru_cache
def get_settings() -> Settings:
    """Get cached singleton instance of application settings.

    Returns:
        Singleton Settings instance with loaded configuration.
    """
    return Settings()
