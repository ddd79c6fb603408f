"""
Shared pytest configuration for damping-lab.

Desk-scale acceptance runs are marked `slow` and only run with --run-slow.
"""

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from damping_lab.model import OU  # noqa: E402


def pytest_addoption(parser):
    parser.addoption('--run-slow', action='store_true', default=False,
                     help='Run desk-scale acceptance tests')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: desk-scale acceptance run (minutes)')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--run-slow'):
        return
    skip = pytest.mark.skip(reason='needs --run-slow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def ou2():
    """The hidden process used throughout: OU with rate 2 around 0."""
    return OU(2.0)


@pytest.fixture
def write_config(tmp_path):
    """Write flat key=value lines to a config file and return its path."""
    def _write(lines, name='model.env'):
        path = tmp_path / name
        path.write_text('\n'.join(lines) + '\n', encoding='utf-8')
        return path
    return _write
