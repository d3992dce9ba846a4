import os
import sys
import warnings

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from dsar.exceptions import IsolatedNodeWarning  # noqa: E402
from dsar.network import build_shards, partition_uniform  # noqa: E402
from dsar.synth import NetworkSpec, TrueModel, make_dataset  # noqa: E402


@pytest.fixture(autouse=True)
def _quiet_isolated():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", IsolatedNodeWarning)
        yield


@pytest.fixture(scope="session")
def sbm_1000():
    return make_dataset(NetworkSpec("sbm", 1000), TrueModel(), seed=11)


@pytest.fixture(scope="session")
def sbm_1000_shards(sbm_1000):
    part = partition_uniform(1000, 5, seed=0)
    return part, build_shards(sbm_1000, part)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def full_scale():
    return os.environ.get("DSAR_PAPER_SCALE", "") not in ("", "0")


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None:
        return
    results = mod.RESULTS
    terminalreporter.section("acceptance criteria")
    for n in range(1, 9):
        status, detail = results.get(n, ("NOT RUN", "deselected, skipped or errored before reporting"))
        terminalreporter.write_line(f"criterion {n}: {status:7s} {detail}")
