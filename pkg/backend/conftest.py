import sys
from pathlib import Path

import pytest

BACKEND_DIR = Path(__file__).resolve().parent
sys.path.insert(0, str(BACKEND_DIR))

import config  # noqa: E402
from ontology import load_ontology  # noqa: E402


@pytest.fixture(scope='session')
def fixtures_dir() -> Path:
    return config.FIXTURES_DIR


@pytest.fixture(scope='session')
def e414_onto():
    return load_ontology(config.fixture_path('e414.onto'))


@pytest.fixture(scope='session')
def ils_onto():
    return load_ontology(config.fixture_path('ils.onto'))


@pytest.fixture(scope='session')
def hvac_onto():
    return load_ontology(config.fixture_path('hvac.onto'))


@pytest.fixture(scope='session')
def tiny_onto():
    return load_ontology(config.fixture_path('tiny.onto'))
