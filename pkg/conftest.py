import os
import sys

import numpy as np
import pytest

ROOT_DIR = os.path.dirname(os.path.abspath(__file__))
if ROOT_DIR not in sys.path:
    sys.path.insert(0, ROOT_DIR)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: multi-second training runs (still run by default)")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def isolated_env(monkeypatch, tmp_path):
    """Keep run directories and thread counts independent of the developer's .env."""
    monkeypatch.setenv("PAN_RUN_ROOT", str(tmp_path / "runs"))
    monkeypatch.setenv("PAN_THREADS", "2")
