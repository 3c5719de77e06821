import os

import numpy as np
import pytest
import torch

torch.set_num_threads(max(1, min(8, os.cpu_count() or 1)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = []


@pytest.fixture
def criterion(request):
    """Record a PASS/FAIL line for an acceptance criterion around the test body."""

    class Recorder:
        detail = ""

    rec = Recorder()
    yield rec
    failed = getattr(request.node, "rep_call", None)
    status = "PASS" if failed is not None and failed.passed else "FAIL"
    if failed is not None and failed.skipped:
        status = "SKIP"
    ACCEPTANCE.append(f"{request.node.name}: {status}  {rec.detail}".rstrip())


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call" or (rep.when == "setup" and rep.skipped):
        item.rep_call = rep


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
