"""
Shared pytest configuration and fixtures for ClusterSlot
"""

import pytest

from orders import generate_base_order
from warehouse_state import GridDims, StateConfig, init_random_state


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run the long experiment checks")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running experiment reproduction")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def tiny_config():
    """6x6x3 grid with 4 empty racks: N = 108 - 12 = 96 article types"""
    return StateConfig(GridDims(6, 6, 3), 96, 10, 4, rng_seed=7)


@pytest.fixture
def tiny_state(tiny_config):
    return init_random_state(tiny_config)


@pytest.fixture
def tiny_order(tiny_config):
    return generate_base_order(tiny_config, seed=3, purchase_orders=6, lines_per_purchase=4)
