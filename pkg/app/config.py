"""
Configuration management for the desk-scale SLAM pipeline
Loads process-wide settings from environment variables
"""
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Process settings loaded from MODSLAM_* environment variables"""

    model_config = SettingsConfigDict(
        env_prefix="MODSLAM_",
        env_file=".env",
        case_sensitive=True,
        extra="ignore",
    )

    # App settings
    APP_NAME: str = "Desk-Scale Dense SLAM"
    APP_VERSION: str = "1.0.0"
    DEBUG: bool = False
    QUIET: bool = False

    # Parallelism cap (torch intra-op threads)
    THREADS: int = 1

    # Default run directory when a config does not name one
    OUTPUT_DIR: str = "runs/latest"


# Singleton settings instance
settings = Settings()
