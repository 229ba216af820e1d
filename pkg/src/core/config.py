from pydantic_settings import BaseSettings
from typing import Optional
from pathlib import Path

class Settings(BaseSettings):
    # App settings
    APP_NAME: str = "Latent Fusion"
    VERSION: str = "1.0.0"

    # Data paths
    DATA_PATH: Path = Path("./data/desk")
    CHECKPOINT_PATH: Path = Path("./runs/checkpoint")
    REPORT_PATH: Path = Path("./runs/reports")

    # Reproducibility
    DEFAULT_SEED: int = 0

    # Worker cap for data generation and evaluation
    LF_THREADS: int = 1

    # Monitoring
    LOG_LEVEL: str = "INFO"
    LOG_DIR: Path = Path("./logs")
    LOG_TO_FILE: bool = False

    # Checkpoint/dataset format versions
    DATASET_FORMAT_VERSION: int = 1
    CHECKPOINT_FORMAT_VERSION: int = 1

    # Optional override of the matplotlib backend used for SVG charts
    PLOT_BACKEND: Optional[str] = "Agg"

    class Config:
        env_file = ".env"
        case_sensitive = True

settings = Settings()
