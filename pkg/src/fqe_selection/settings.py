"""Process-level settings read from the environment."""

import logging
import os
import sys
from dataclasses import dataclass

import sentry_sdk
from dotenv import load_dotenv

from fqe_selection.exceptions import ConfigurationError

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
LOG_LEVELS = frozenset({'DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'})


@dataclass(frozen=True)
class Settings:
    """Logging level, default worker count and Sentry DSN."""

    log_level: str = 'INFO'
    workers: int = 1
    sentry_dsn: str = ''


def load_settings(dotenv: bool = True) -> Settings:  # noqa: FBT001, FBT002
    """Read FQESEL_LOG_LEVEL, FQESEL_WORKERS and SENTRY_DSN.

    Args:
        dotenv: Load a ``.env`` file from the working directory first

    Returns:
        The settings

    Raises:
        ConfigurationError: If FQESEL_WORKERS is not a positive integer or the level is unknown

    """
    if dotenv:
        load_dotenv()
    raw_workers = os.getenv('FQESEL_WORKERS', '1')
    try:
        workers = int(raw_workers)
    except ValueError as exc:
        msg = f'FQESEL_WORKERS must be an integer, got {raw_workers!r}'
        raise ConfigurationError(msg) from exc
    if workers < 1:
        msg = f'FQESEL_WORKERS must be positive, got {workers}'
        raise ConfigurationError(msg)
    log_level = os.getenv('FQESEL_LOG_LEVEL', 'INFO').upper()
    if log_level not in LOG_LEVELS:
        msg = f'FQESEL_LOG_LEVEL must be one of {sorted(LOG_LEVELS)}, got {log_level!r}'
        raise ConfigurationError(msg)
    return Settings(
        log_level=log_level,
        workers=workers,
        sentry_dsn=os.getenv('SENTRY_DSN', ''),
    )


def configure_logging(settings: Settings) -> None:
    """Configure root logging to stderr and initialize Sentry (a no-op without a DSN)."""
    logging.basicConfig(level=settings.log_level, format=LOG_FORMAT, stream=sys.stderr)
    sentry_sdk.init(dsn=settings.sentry_dsn)
