import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from modules import ndgrad as nd
from modules.config import LabConfig


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run desk-scale training experiments")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale experiment, runs only with --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def float64_defaults():
    nd.set_default_dtype(np.float64)
    nd.set_log_epsilon(1e-12)
    yield
    nd.set_default_dtype(np.float64)
    nd.set_log_epsilon(1e-12)


@pytest.fixture
def tiny_config():
    """Small world and models so an end-to-end run finishes in seconds"""
    return LabConfig().replace(
        height=16, width=16,
        flow_layers=2, flow_hidden=16, flow_epochs=2, flow_batch_size=4,
        embed_dim=16, num_blocks=1, num_heads=2, mlp_hidden=16, struct_epochs=1, struct_batch_size=4,
        warmup_epochs=1, adapt_epochs=1, batch_size=2,
        num_source=4, num_target=4, num_eval=2, workers=2,
    )
