"""
Runtime settings and logging setup.
Settings come from an optional .env file and FLI_* environment variables.
"""

import os
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv

from src.errors import ConfigError

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
_TRUE_VALUES = {"1", "true", "yes", "on"}
_FALSE_VALUES = {"0", "false", "no", "off"}


@dataclass
class FliSettings:
    """Process-wide settings shared by the CLI and library entry points."""
    log_level: str = "INFO"
    log_file: Optional[str] = None
    default_seed: int = 42
    workers: int = 1
    deterministic: bool = True

    def validate(self) -> None:
        if logging.getLevelName(self.log_level.upper()) not in (
                logging.DEBUG, logging.INFO, logging.WARNING, logging.ERROR, logging.CRITICAL):
            raise ConfigError(f"Unknown log level: {self.log_level}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        if self.default_seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.default_seed}")


def _parse_bool(name: str, value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in _TRUE_VALUES:
        return True
    if lowered in _FALSE_VALUES:
        return False
    raise ConfigError(f"{name} must be a boolean, got {value!r}")


def _parse_int(name: str, value: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"{name} must be an integer, got {value!r}")


def load_settings(env_file: Optional[str] = None) -> FliSettings:
    """
    Build settings from the environment.

    Args:
        env_file: Optional path to a .env file; when omitted a .env in the
            working directory is used if present.

    Returns:
        Validated FliSettings
    """
    if env_file is not None:
        if not Path(env_file).exists():
            raise ConfigError(f"Env file not found: {env_file}")
        load_dotenv(env_file, override=False)
    else:
        load_dotenv(override=False)

    settings = FliSettings()
    if "FLI_LOG_LEVEL" in os.environ:
        settings.log_level = os.environ["FLI_LOG_LEVEL"].upper()
    if os.environ.get("FLI_LOG_FILE"):
        settings.log_file = os.environ["FLI_LOG_FILE"]
    if "FLI_SEED" in os.environ:
        settings.default_seed = _parse_int("FLI_SEED", os.environ["FLI_SEED"])
    if "FLI_WORKERS" in os.environ:
        settings.workers = _parse_int("FLI_WORKERS", os.environ["FLI_WORKERS"])
    if "FLI_DETERMINISTIC" in os.environ:
        settings.deterministic = _parse_bool("FLI_DETERMINISTIC", os.environ["FLI_DETERMINISTIC"])

    settings.validate()
    return settings


def setup_logging(settings: FliSettings) -> None:
    """Setup logging configuration."""
    handlers: list[logging.Handler] = [logging.StreamHandler()]
    if settings.log_file:
        handlers.append(logging.FileHandler(settings.log_file))
    logging.basicConfig(
        level=settings.log_level.upper(),
        format=LOG_FORMAT,
        handlers=handlers,
        force=True,
    )
    logger.debug(f"Logging configured at {settings.log_level}")
