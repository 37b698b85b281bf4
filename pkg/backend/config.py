"""
Runtime configuration
Values come from the environment (optionally a .env file) with typed defaults
"""

import os
from pathlib import Path

from dotenv import load_dotenv

load_dotenv()

ROOT_DIR = Path(__file__).resolve().parent.parent

ENVIRONMENT = os.getenv('ONTOSYS_ENV', 'development')
IS_PRODUCTION = ENVIRONMENT == 'production'
LOG_LEVEL = os.getenv('ONTOSYS_LOG_LEVEL')

DATA_DIR = Path(os.getenv('ONTOSYS_DATA_DIR', str(ROOT_DIR / 'data')))
FIXTURES_DIR = Path(os.getenv('ONTOSYS_FIXTURES_DIR', str(ROOT_DIR / 'fixtures')))

DEFAULT_SEED = int(os.getenv('ONTOSYS_SEED', '7'))

# Chase oracle guard against blow-up
CHASE_MAX_ABOX = int(os.getenv('ONTOSYS_CHASE_MAX_ABOX', '10000'))

# Benchmark repetitions per (day, path); medians are reported
BENCH_REPETITIONS = int(os.getenv('ONTOSYS_BENCH_REPETITIONS', '5'))

DDSS_HOST = os.getenv('ONTOSYS_DDSS_HOST', '127.0.0.1')
DDSS_PORT = int(os.getenv('ONTOSYS_DDSS_PORT', '8080'))

SENTRY_DSN = os.getenv('SENTRY_DSN')
GIT_COMMIT = os.getenv('GIT_COMMIT', 'dev')


def fixture_path(name: str) -> Path:
    """Absolute path of a bundled fixture file"""
    return FIXTURES_DIR / name
