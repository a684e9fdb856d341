from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from egoflow import ego_net  # noqa: E402
from egoflow.volume_builder import NormStats  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_model():
    return ego_net.init_model(["a", "b", "c"], NormStats(1.0, 1.0), seed=7, arch=ego_net.TINY)


@pytest.fixture(scope="session")
def standard_model():
    return ego_net.init_model([f"class{k}" for k in range(7)], NormStats(2.5, 1.5), seed=0)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        terminalreporter.write_line(results[number])
