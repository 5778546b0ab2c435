import time

import numpy as np
import pytest

from purifylab.distributions import two_dirac
from purifylab.nn import init_net
from purifylab.timegrid import KarrasGrid
from purifylab.training import DistillConfig, FinetuneConfig, distill, finetune, loss_kind

_ACCEPTANCE = []

# wall time spent building the expensive session fixtures, so runtime budgets can include it
BUILD_SECONDS = {}


@pytest.fixture(scope="session")
def grid():
    return KarrasGrid()


@pytest.fixture(scope="session")
def dist1():
    return two_dirac()


@pytest.fixture(scope="session")
def distilled_net(dist1, grid):
    start = time.perf_counter()
    net = init_net(1, eps=grid.eps, rng=np.random.default_rng(0))
    net = distill(dist1, net, DistillConfig(grid=grid, batch=256, iters=4000, seed=0))
    BUILD_SECONDS["distill"] = time.perf_counter() - start
    return net


@pytest.fixture(scope="session")
def finetuned_net(dist1, grid, distilled_net):
    start = time.perf_counter()
    cfg = FinetuneConfig(sigmas=(0.25, 0.5, 1.0), iters=2000, loss=loss_kind("feature", 1), seed=1)
    net = finetune(dist1, distilled_net, grid, cfg)
    BUILD_SECONDS["finetune"] = time.perf_counter() - start
    return net


_DETAILS = {}


@pytest.fixture
def record(request):
    """Attach a measured-value note to this test's line in the acceptance summary."""

    def add(text):
        _DETAILS.setdefault(request.node.nodeid, []).append(text)

    return add


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _ACCEPTANCE.append((report.nodeid, report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid, outcome in _ACCEPTANCE:
        name = nodeid.split("::")[-1]
        notes = "; ".join(_DETAILS.get(nodeid, []))
        terminalreporter.write_line(f"{'PASS' if outcome == 'passed' else 'FAIL'}  {name}" + (f"  [{notes}]" if notes else ""))
