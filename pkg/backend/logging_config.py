"""
Logging setup for the toolkit
Plain text on stderr during development, JSON records in production.
Sentry is opt-in and only wired up by the DDSS service.
"""

import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

from pythonjsonlogger import jsonlogger

import config
from errors import OntoSysError

_sentry_ready = False


def init_sentry(with_flask: bool = True) -> bool:
    """Initialise Sentry once when SENTRY_DSN is set; returns whether it is active"""
    global _sentry_ready
    if _sentry_ready or not config.SENTRY_DSN:
        return _sentry_ready

    import sentry_sdk
    from sentry_sdk.integrations.logging import LoggingIntegration

    integrations = [LoggingIntegration(level=logging.INFO, event_level=logging.ERROR)]
    if with_flask:
        from sentry_sdk.integrations.flask import FlaskIntegration
        integrations.append(FlaskIntegration())

    sentry_sdk.init(
        dsn=config.SENTRY_DSN,
        integrations=integrations,
        traces_sample_rate=0.1,
        environment=config.ENVIRONMENT,
        release=config.GIT_COMMIT,
    )
    _sentry_ready = True
    return True


class OntoSysJsonFormatter(jsonlogger.JsonFormatter):
    """Adds service, environment and source location to each record"""

    def add_fields(self, log_record, record, message_dict):
        super().add_fields(log_record, record, message_dict)
        log_record['timestamp'] = datetime.now(timezone.utc).isoformat()
        log_record['level'] = record.levelname
        log_record['service'] = 'ontosys'
        log_record['environment'] = config.ENVIRONMENT
        if record.pathname:
            log_record['file'] = Path(record.pathname).name
            log_record['line'] = record.lineno


def _default_level() -> int:
    if config.LOG_LEVEL:
        return getattr(logging, config.LOG_LEVEL.upper(), logging.INFO)
    return logging.INFO if config.IS_PRODUCTION else logging.WARNING


def setup_logging(name=None, level=None):
    """
    Configure a logger with one stderr handler

    Args:
        name: Logger name (defaults to root)
        level: Logging level (defaults to ONTOSYS_LOG_LEVEL, else INFO in
               production and WARNING in development)

    Returns:
        Configured logger instance
    """
    level = level if level is not None else _default_level()

    logger = logging.getLogger(name)
    logger.setLevel(level)
    logger.handlers = []

    # stdout carries command output
    handler = logging.StreamHandler(sys.stderr)
    handler.setLevel(level)
    if config.IS_PRODUCTION:
        handler.setFormatter(OntoSysJsonFormatter('%(timestamp)s %(level)s %(name)s %(message)s'))
    else:
        handler.setFormatter(logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s',
                                               datefmt='%Y-%m-%d %H:%M:%S'))
    logger.addHandler(handler)
    return logger


def log_performance(logger, operation, duration_ms, metadata=None):
    """Timing of a named operation, in milliseconds"""
    logger.info(
        f"{operation} took {duration_ms:.1f} ms",
        extra={
            'operation': operation,
            'duration_ms': duration_ms,
            'metadata': metadata or {},
            'type': 'performance',
        }
    )


def log_diagnostic(logger, record):
    """One outgoing DDSS event; degraded ones are logged as warnings"""
    level = logging.WARNING if record.degraded else logging.INFO
    logger.log(
        level,
        f"{record.event_class} from {record.source} at {record.t.isoformat()}",
        extra={
            'event_class': record.event_class,
            'source': record.source,
            'indicator': record.indicator,
            'degraded': record.degraded,
            'type': 'diagnostic',
        }
    )


def log_error(logger, error, context=None):
    """
    Log a failure with its context

    Toolkit errors are expected input problems: they carry their code and
    details and are logged without a traceback. Anything else gets the
    traceback and reaches Sentry when it is configured.
    """
    if isinstance(error, OntoSysError):
        logger.error(
            f"{error.code}: {error.message}",
            extra={
                'error_code': error.code,
                'details': error.details,
                'context': context or {},
                'type': 'error',
            }
        )
        return
    logger.error(
        str(error),
        extra={
            'error_type': type(error).__name__ if isinstance(error, Exception) else 'Error',
            'context': context or {},
            'type': 'error',
        },
        exc_info=isinstance(error, Exception)
    )
