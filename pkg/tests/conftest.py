from __future__ import annotations

import sys

import numpy as np
import pytest

from scalestf.data import SpatiotemporalSeries
from scalestf.graphs import GpvarConfig, community_graph, gpvar_generate


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_series() -> SpatiotemporalSeries:
    """Six-node GP-VAR series long enough for train/val/test windows."""
    g = community_graph(2, 3, 0.9, 0.2, seed=3)
    return gpvar_generate(g, GpvarConfig(steps=400, seed=5))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
