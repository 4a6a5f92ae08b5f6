#!/usr/bin/env python3
"""
Configuration Settings

Centralized configuration management for the LQ team toolkit.
Uses environment variables (and an optional .env file) with sensible defaults.
"""

import logging
import sys
from typing import List, Optional

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict
from pythonjsonlogger import jsonlogger

from .errors import ConfigurationError

# Loggers of every module live below this name (src.main.python)
ROOT_LOGGER = __name__.rsplit(".", 2)[0]


class Settings(BaseSettings):
    """Application settings loaded from environment variables"""

    # Logging Configuration
    LOG_LEVEL: str = "INFO"
    LOG_FORMAT: str = "text"
    DEBUG: bool = False

    # Numerical Tolerances
    PD_TOLERANCE: float = Field(1e-10, gt=0)
    PSD_TOLERANCE: float = Field(1e-10, ge=0)
    SYMMETRY_TOLERANCE: float = Field(1e-9, gt=0)
    MIDPOINT_INTERPOLATION: str = "cubic"
    RICCATI_RESIDUAL_TOL: float = Field(1e-6, gt=0)

    # Mean-field Fixed Point
    PICARD_MAX_ITER: int = Field(200, ge=1)
    PICARD_TOL: float = Field(1e-8, gt=0)
    PICARD_DAMPING: float = Field(0.5, gt=0, le=1)

    # Monte Carlo Configuration
    MC_N_PATHS: int = Field(1000, ge=1)
    MC_SEED: int = Field(20240101, ge=0)
    MC_CHUNK_SIZE: int = Field(512, ge=1)
    MC_SCHEME: str = "euler"
    MAX_WORKERS: int = Field(2, ge=1)

    # Verification Configuration
    STATIONARITY_TOL: float = Field(1e-9, gt=0)
    PBP_EPS: List[float] = [1e-3]
    PBP_DIRECTIONS: int = Field(10, ge=1)
    PBP_FIRST_TOL: float = Field(1e-5, gt=0)
    PBP_SECOND_TOL: float = Field(1e-6, ge=0)
    ORDERING_TOL: float = Field(1e-8, ge=0)
    VERIFY_N_PATHS: int = Field(64, ge=1)

    # Output Configuration
    OUTPUT_DIR: str = "output"
    CSV_FLOAT_FORMAT: str = "%.17g"

    model_config = SettingsConfigDict(env_file=".env", env_file_encoding="utf-8", extra="ignore")


# Global settings instance
_settings: Optional[Settings] = None


def get_settings() -> Settings:
    """Get application settings singleton"""
    global _settings
    if _settings is None:
        _settings = Settings()
    return _settings


def reload_settings() -> Settings:
    """Reload settings from environment (useful for testing)"""
    global _settings
    _settings = None
    return get_settings()


def validate_config() -> bool:
    """Validate settings that pydantic field constraints cannot express"""
    settings = get_settings()

    problems = []
    if settings.MIDPOINT_INTERPOLATION not in ("cubic", "linear"):
        problems.append(f"MIDPOINT_INTERPOLATION={settings.MIDPOINT_INTERPOLATION!r}")
    if settings.MC_SCHEME not in ("euler", "rk4"):
        problems.append(f"MC_SCHEME={settings.MC_SCHEME!r}")
    if settings.LOG_FORMAT not in ("text", "json"):
        problems.append(f"LOG_FORMAT={settings.LOG_FORMAT!r}")
    if not settings.PBP_EPS or any(eps <= 0 for eps in settings.PBP_EPS):
        problems.append(f"PBP_EPS={settings.PBP_EPS!r}")

    if problems:
        raise ConfigurationError(f"Invalid configuration: {', '.join(problems)}", kind="invalid_config")

    return True


def setup_logger(name: str = ROOT_LOGGER, level: Optional[str] = None) -> logging.Logger:
    """
    Setup logger with consistent formatting

    Args:
        name: Logger name (the package root by default, so every module logger inherits it)
        level: Level name overriding LOG_LEVEL

    Returns:
        Configured logger instance
    """
    settings = get_settings()
    level = getattr(logging, (level or settings.LOG_LEVEL).upper(), logging.INFO)

    logger = logging.getLogger(name)
    logger.setLevel(level)

    # Avoid duplicate handlers
    if logger.handlers:
        for handler in logger.handlers:
            handler.setLevel(level)
        return logger

    # stdout is reserved for the CLI's JSON results
    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(level)

    if settings.LOG_FORMAT == "json":
        formatter = jsonlogger.JsonFormatter(
            fmt='%(asctime)s %(name)s %(levelname)s %(message)s',
            datefmt='%Y-%m-%d %H:%M:%S'
        )
    elif settings.DEBUG:
        formatter = logging.Formatter(
            fmt='%(asctime)s - %(name)s - %(levelname)s - %(funcName)s:%(lineno)d - %(message)s',
            datefmt='%Y-%m-%d %H:%M:%S'
        )
    else:
        formatter = logging.Formatter(
            fmt='%(asctime)s - %(levelname)s - %(message)s',
            datefmt='%Y-%m-%d %H:%M:%S'
        )

    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)

    # Prevent propagation to avoid duplicate logs
    logger.propagate = False

    return logger
